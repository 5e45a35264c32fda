"""Encode text as escaped UTF-8 hexadecimal and back."""
import codecs
from functools import partial
from typing import (
    Generator,
    Optional,
    Tuple,
    Union,
)

_Str = Union[str, bytes]
NAME = __name__.split('.')[-1]


def _each_utf8_hex(text: _Str) -> \
                        Generator[str, None, None]:
    for char in text:
        if ord(char) < 128 and char.isprintable():
            yield char
            continue
        utf8_bytes = char.encode('utf8')
        for utf8_byte in utf8_bytes:
            str_hex = '\\%s' % hex(utf8_byte)[1:]
            yield str_hex


def encode(
        text: _Str,
        errors: _Str = 'strict'
) -> Tuple[bytes, int]:
    """Convert a string into escaped UTF-8 hexadecimal bytes.

    Non-printable and non-ASCII characters become ``\\xNN`` sequences,
    one per UTF-8 byte.
    """
    text_input = str(text)
    errors = str(errors)
    out_str: str = ''.join(_each_utf8_hex(text_input))
    out_bytes = out_str.encode('ascii', errors)
    return out_bytes, len(text)


def decode(
        data: bytes,
        errors: _Str = 'strict'
) -> Tuple[str, int]:
    """Convert escaped UTF-8 hexadecimal bytes into a string."""
    data_bytes = bytes(data)
    errors = str(errors)
    try:
        text_str = data_bytes.decode('unicode_escape')
    except UnicodeDecodeError as e:
        raise UnicodeDecodeError(
            'eutf8h',
            data_bytes,
            e.start,
            e.end,
            e.reason,
        )
    text_bytes = text_str.encode('latin1')
    try:
        out = text_bytes.decode('utf-8', errors=errors)
    except UnicodeDecodeError as e:
        raise UnicodeDecodeError(
            'eutf8h',
            data_bytes,
            e.start,
            e.end,
            e.reason,
        )
    return out, len(data)


def _get_codec_info(name: str) -> Optional[codecs.CodecInfo]:
    if name == NAME:
        obj = codecs.CodecInfo(
            name=NAME,
            encode=encode,
            decode=decode,
        )
        return obj
    return None


def register() -> None:
    """Register the codec with Python.

    Registration is idempotent: a codec already known under this name is
    left as it is.
    """
    try:
        codecs.getdecoder(NAME)
    except LookupError:
        codecs.register(_get_codec_info)


def encode_text(text: str) -> str:
    """Shorthand for encoding and decoding back to ``str``."""
    data, _ = encode(text)
    return data.decode('ascii')


escape = partial(encode_text)
