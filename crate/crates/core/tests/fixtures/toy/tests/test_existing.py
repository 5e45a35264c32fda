from toy.mathx import clamp, sign
from toy.shapes import Rect
from toy.text import slug


def test_clamp_inside():
    assert clamp(5, 0, 10) == 5


def test_sign():
    assert sign(-3) == -1
    assert sign(3) == 1


def test_area():
    assert Rect(2, 3).area() == 6


def test_slug():
    assert slug("Hello, World") == "hello-world"

# sim: lines toy/mathx.py 1-2, 4, 6, 9-12
# sim: branches toy/mathx.py 2->4, 4->6, 10->11, 10->12
# sim: lines toy/shapes.py 1-4, 6-7, 9
# sim: lines toy/text.py 1, 4-6, 9
