#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use covergen::coverage::{line, Branch, BranchTarget, CoverageReport, FileCoverage, LineNo};
use covergen::gateway::{ChatGateway, ChatRequest, ChatResponse, GatewayError};
use covergen::outline::{LineRange, NodeKind, OutlineNode};
use covergen::prompt::Role;
use covergen::segment::CodeSegment;
use rand::Rng;

pub mod suites;

pub fn fixture_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dst = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &dst);
        } else {
            std::fs::copy(entry.path(), dst).unwrap();
        }
    }
}

/// A fresh copy of the toy project: `src/` holds the code, `tests/` the suite.
pub fn toy_project() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture_dir("toy"), dir.path());
    dir
}

pub fn simrunner() -> String {
    env!("CARGO_BIN_EXE_covergen-simrunner").to_string()
}

pub fn covergen_bin() -> String {
    env!("CARGO_BIN_EXE_covergen").to_string()
}

/// Runner command for the simulated target rooted at the source dir.
pub fn sim_runner_command() -> String {
    format!("{} --root {{source_dir}}", shlex::try_quote(&simrunner()).unwrap())
}

fn fenced(body: &str) -> String {
    format!("```python\n{body}```\n")
}

/// The replies a model gives on the toy project, by module and round:
/// `toy.mathx` succeeds at once, `toy.text` after a failing test, and
/// `toy.shapes` after a test that adds nothing and one that errors.
pub fn toy_reply(module: &str, round: usize) -> Option<String> {
    let body = match (module, round) {
        ("toy.mathx", 1) => concat!(
            "from toy.mathx import clamp\n\n\n",
            "def test_clamp_bounds():\n",
            "    assert clamp(-5, 0, 10) == 0\n",
            "    assert clamp(50, 0, 10) == 10\n\n",
            "# sim: lines toy/mathx.py 1-5\n",
            "# sim: branches toy/mathx.py 2->3, 2->4, 4->5\n",
        ),
        ("toy.text", 1) => concat!(
            "from toy.text import shout\n\n\n",
            "def test_shout():\n",
            "    assert shout('hi', 2) == 'HI!'\n\n",
            "# sim: lines toy/text.py 1, 4, 9-10, 12\n",
            "# sim: branches toy/text.py 10->12\n",
            "# sim: fail AssertionError: assert 'HI!HI!' == 'HI!'\n",
        ),
        ("toy.text", 2) => concat!(
            "import pytest\n",
            "from toy.text import shout\n\n\n",
            "def test_shout_repeats():\n",
            "    assert shout('hi', 2) == 'HI!HI!'\n\n\n",
            "def test_shout_rejects_zero():\n",
            "    with pytest.raises(ValueError):\n",
            "        shout('hi', 0)\n\n",
            "# sim: lines toy/text.py 1, 4, 9-12\n",
            "# sim: branches toy/text.py 10->11, 10->12\n",
        ),
        ("toy.shapes", 1) => concat!(
            "from toy.shapes import Rect\n\n\n",
            "def test_area():\n",
            "    assert Rect(3, 4).area() == 12\n\n",
            "# sim: lines toy/shapes.py 1-4, 6-7, 9\n",
        ),
        ("toy.shapes", 2) => concat!(
            "from toy.shapes import Rect\n\n\n",
            "def test_scale_rejects_zero():\n",
            "    with pytest.raises(ValueError):\n",
            "        Rect(1, 1).scale(0)\n\n",
            "# sim: lines toy/shapes.py 1-4, 9-11\n",
            "# sim: error NameError: name 'pytest' is not defined\n",
        ),
        ("toy.shapes", 3) => concat!(
            "import pytest\n",
            "from toy.shapes import Rect\n\n\n",
            "def test_scale():\n",
            "    r = Rect(1, 2).scale(3)\n",
            "    assert (r.w, r.h) == (3, 6)\n\n\n",
            "def test_scale_rejects_zero():\n",
            "    with pytest.raises(ValueError):\n",
            "        Rect(1, 1).scale(0)\n\n",
            "# sim: lines toy/shapes.py 1-4, 9-12\n",
            "# sim: branches toy/shapes.py 10->11, 10->12\n",
        ),
        _ => return None,
    };
    Some(if module == "toy.text" { format!("Here is a test for `shout`:\n\n{}", fenced(body)) } else { fenced(body) })
}

/// Answers from [`toy_reply`], picking the module from the first user
/// message and the round from the number of replies so far.
pub struct ToyGateway;

impl ChatGateway for ToyGateway {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let first = request.messages.iter().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("");
        let module = ["toy.mathx", "toy.text", "toy.shapes"]
            .into_iter()
            .find(|m| first.contains(&format!("module {m}")))
            .unwrap_or("");
        let round = 1 + request.messages.iter().filter(|m| m.role == Role::Assistant).count();
        let content = toy_reply(module, round).ok_or_else(|| GatewayError::ScriptMiss(request.key()))?;
        let prompt_tokens = covergen::prompt::estimate_tokens(&request.messages) as u64;
        Ok(ChatResponse { completion_tokens: content.len() as u64 / 4, content, prompt_tokens })
    }
}

// ---- random outlines and the brute-force segmentation oracle ----

fn gen_children(
    rng: &mut impl Rng,
    start: u32,
    end: u32,
    depth: u32,
    budget: &mut usize,
    parent_is_class: bool,
    counter: &mut u32,
) -> Vec<OutlineNode> {
    let mut out = Vec::new();
    let mut pos = start;
    while pos <= end && *budget > 0 {
        pos += rng.random_range(0..=3);
        if pos > end {
            break;
        }
        let room = end - pos + 1;
        let len = rng.random_range(1..=room.min(if depth == 1 { 160 } else { 90 }));
        let (s, e) = (pos, pos + len - 1);
        *budget -= 1;
        *counter += 1;
        let is_class = depth < 4 && rng.random_bool(0.4);
        let header_len = if len > 1 { rng.random_range(0..=1) } else { 0 };
        let children = if len > 2 && depth < 4 {
            gen_children(rng, s + header_len + 1, e, depth + 1, budget, is_class, counter)
        } else {
            Vec::new()
        };
        let kind = if is_class {
            NodeKind::Class
        } else if parent_is_class {
            NodeKind::Method
        } else {
            NodeKind::Function
        };
        out.push(OutlineNode {
            kind,
            name: format!("n{counter}"),
            header: LineRange::new(s, s + header_len),
            span: LineRange::new(s, e),
            children,
        });
        pos = e + 1;
    }
    out
}

/// A random valid module outline with at most `max_nodes` nodes besides the
/// module itself.
pub fn random_outline(rng: &mut impl Rng, max_nodes: usize) -> OutlineNode {
    let total = rng.random_range(5..=400);
    let mut budget = rng.random_range(1..=max_nodes);
    let mut counter = 0;
    let children = gen_children(rng, 1, total, 1, &mut budget, false, &mut counter);
    let module = OutlineNode {
        kind: NodeKind::Module,
        name: "pkg.mod".into(),
        header: LineRange::new(1, 1),
        span: LineRange::new(1, total),
        children,
    };
    module.validate().expect("generated outline is valid");
    module
}

/// Random coverage for a file of `total` lines.
pub fn random_coverage(rng: &mut impl Rng, total: u32) -> FileCoverage {
    let density = rng.random_range(0.0..0.3);
    let mut fc = FileCoverage::default();
    for l in 1..=total {
        let r: f64 = rng.random();
        if r < density {
            fc.missing_lines.insert(line(l));
        } else if r < 0.8 {
            fc.executed_lines.insert(line(l));
        }
    }
    for _ in 0..rng.random_range(0..6) {
        let s = rng.random_range(1..=total);
        let t = if rng.random_bool(0.2) {
            BranchTarget::Exit
        } else {
            BranchTarget::Line(line(rng.random_range(1..=total)))
        };
        fc.missing_branches.insert(Branch::new(line(s), t));
    }
    fc
}

struct Flat<'a> {
    node: &'a OutlineNode,
    ancestors: Vec<&'a OutlineNode>,
}

fn flatten<'a>(node: &'a OutlineNode, ancestors: Vec<&'a OutlineNode>, out: &mut Vec<Flat<'a>>) {
    for c in &node.children {
        let mut anc = ancestors.clone();
        anc.push(c);
        out.push(Flat { node: c, ancestors: ancestors.clone() });
        flatten(c, anc, out);
    }
}

/// What the oracle expects for one interesting line: the node span and
/// context headers, or `None` for a module-level line.
pub type Expected = Option<(LineRange, Vec<LineRange>)>;

/// Scans every node for the deepest one containing `l` that is reachable
/// through over-long classes only.
pub fn oracle_segment(outline: &OutlineNode, l: LineNo, max_len: u32) -> Expected {
    let mut flat = Vec::new();
    flatten(outline, Vec::new(), &mut flat);
    flat.iter()
        .filter(|f| f.node.span.contains(l))
        .filter(|f| f.ancestors.iter().all(|a| a.is_class() && a.span.len() > max_len && a.span.contains(l)))
        .max_by_key(|f| f.ancestors.len())
        .map(|f| (f.node.span, f.ancestors.iter().map(|a| a.header).collect()))
}

/// Checks `segments` against the oracle for every interesting line of `fc`.
/// Returns a description of the first disagreement.
pub fn check_against_oracle(
    outline: &OutlineNode,
    fc: &FileCoverage,
    segments: &[CodeSegment],
    max_len: u32,
) -> Result<(), String> {
    let interesting = covergen::segment::interesting_lines(fc);
    for &l in &interesting {
        // Segments nest when an over-long class has interesting lines both
        // in its own body and in a member; the innermost one owns the line.
        let holders: Vec<&CodeSegment> = segments.iter().filter(|s| s.node_span.contains(l)).collect();
        let Some(seg) = holders.iter().min_by_key(|s| s.node_span.len()).copied() else {
            return Err(format!("line {l}: no segment contains it"));
        };
        if holders.iter().filter(|s| s.node_span.len() == seg.node_span.len()).count() != 1 {
            return Err(format!("line {l}: several innermost segments"));
        }
        if !seg.lines_of_interest().contains(&l) {
            return Err(format!("line {l}: not among the segment's lines of interest"));
        }
        match oracle_segment(outline, l, max_len) {
            Some((span, ctx)) => {
                if seg.node_span != span || seg.context_headers != ctx {
                    return Err(format!(
                        "line {l}: got {:?} ctx {:?}, oracle {:?} ctx {:?}",
                        seg.node_span, seg.context_headers, span, ctx
                    ));
                }
            }
            None => {
                if holders.len() != 1 || !seg.scope_path.is_empty() || seg.node_span.len() > max_len {
                    return Err(format!(
                        "line {l}: expected a module window of <= {max_len} lines, got {:?}",
                        seg.node_span
                    ));
                }
            }
        }
    }
    let expected_lines: BTreeSet<LineNo> = fc.missing_lines.clone();
    let got_lines: BTreeSet<LineNo> = segments.iter().flat_map(|s| s.interesting_lines.iter().copied()).collect();
    if got_lines != expected_lines {
        return Err("segments' interesting lines differ from the missing lines".into());
    }
    Ok(())
}

pub fn report_of(path: &str, fc: FileCoverage) -> CoverageReport {
    CoverageReport { files: BTreeMap::from([(path.to_string(), fc)]), source_id: None }
}

// ---- a generated project of many small modules ----

/// `n` modules `pkg/m{i}.py`, each one function whose true branch (line 3)
/// the existing suite misses.
pub struct Grid {
    pub dir: tempfile::TempDir,
    pub n: usize,
}

pub const GRID_FUNCTION: &str = "def f(x):\n    if x > 0:\n        return 1\n    return 0\n";

impl Grid {
    pub fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src/pkg");
        let tests = dir.path().join("tests");
        std::fs::create_dir_all(&src).unwrap();
        std::fs::create_dir_all(&tests).unwrap();
        std::fs::write(src.join("__init__.py"), "").unwrap();
        let mut files = serde_json::Map::new();
        let mut existing = String::from("def test_existing():\n    pass\n\n");
        for i in 0..n {
            std::fs::write(src.join(format!("m{i}.py")), GRID_FUNCTION).unwrap();
            files.insert(format!("pkg/m{i}.py"), serde_json::json!({"lines": "1-4", "branches": ["2->3", "2->4"]}));
            existing.push_str(&format!("# sim: lines pkg/m{i}.py 1-2, 4\n# sim: branches pkg/m{i}.py 2->4\n"));
        }
        let universe = serde_json::json!({"files": files, "modules": ["pkg"]});
        std::fs::write(dir.path().join("src/sim-universe.json"), universe.to_string()).unwrap();
        std::fs::write(tests.join("test_existing.py"), existing).unwrap();
        Self { dir, n }
    }

    pub fn src(&self) -> PathBuf {
        self.dir.path().join("src")
    }

    pub fn tests(&self) -> PathBuf {
        self.dir.path().join("tests")
    }

    pub fn adapter(&self) -> covergen::sim::SimAdapter {
        covergen::sim::SimAdapter::new(covergen::sim::Universe::load(&self.src()).unwrap(), self.tests(), 0)
    }
}

/// A test for module `i` of a [`Grid`] that covers its missing branch.
pub fn grid_covering_test(i: usize) -> String {
    format!(
        "from pkg.m{i} import f\n\n\ndef test_f{i}_positive():\n    assert f(5) == 1\n\n# sim: lines pkg/m{i}.py 1-3\n# sim: branches pkg/m{i}.py 2->3\n"
    )
}

/// A passing test for module `i` that adds nothing.
pub fn grid_useless_test(i: usize) -> String {
    format!(
        "from pkg.m{i} import f\n\n\ndef test_f{i}_zero():\n    assert f(0) == 0\n\n# sim: lines pkg/m{i}.py 1-2, 4\n"
    )
}

/// A failing test for module `i`.
pub fn grid_failing_test(i: usize) -> String {
    format!(
        "from pkg.m{i} import f\n\n\ndef test_f{i}():\n    assert f(5) == 2\n\n# sim: lines pkg/m{i}.py 1-3\n# sim: fail AssertionError: assert 1 == 2\n"
    )
}

/// Module index and round of a request against a [`Grid`].
pub fn grid_request(request: &ChatRequest) -> (usize, usize) {
    let first = request.messages.iter().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("");
    let at = first.find("module pkg.m").expect("grid prompt") + "module pkg.m".len();
    let digits: String = first[at..].chars().take_while(char::is_ascii_digit).collect();
    let round = 1 + request.messages.iter().filter(|m| m.role == Role::Assistant).count();
    (digits.parse().unwrap(), round)
}

/// Answers with whatever the closure returns for `(module, round)`.
pub struct FnGateway<F>(pub F);

impl<F: Fn(usize, usize) -> String + Send + Sync> ChatGateway for FnGateway<F> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let (module, round) = grid_request(request);
        let content = (self.0)(module, round);
        Ok(ChatResponse {
            prompt_tokens: covergen::prompt::estimate_tokens(&request.messages) as u64,
            completion_tokens: content.len() as u64 / 4,
            content,
        })
    }
}

/// Module `i` succeeds on prompt `1 + i % 3` after failing tests, except
/// every fourth module, which only ever gets tests that add nothing.
pub fn grid_reply(i: usize, round: usize) -> String {
    let body = if i % 4 == 3 {
        grid_useless_test(i)
    } else if round > i % 3 {
        grid_covering_test(i)
    } else {
        grid_failing_test(i)
    };
    fenced(&body)
}

/// A random coverage file in wire form, and the hand count of its
/// (covered, total) lines plus branches.
pub fn wire_fixture(rng: &mut impl Rng) -> (String, u64, u64) {
    let mut files = serde_json::Map::new();
    let (mut covered, mut total) = (0, 0);
    for f in 0..rng.random_range(1..6) {
        let (mut el, mut ml, mut eb, mut mb) = (vec![], vec![], vec![], vec![]);
        for l in 1..=rng.random_range(0..80u32) {
            match rng.random_range(0..3) {
                0 => el.push(l),
                1 => ml.push(l),
                _ => {}
            }
        }
        for s in 1..=rng.random_range(0..15u32) {
            let t = if rng.random_bool(0.2) { 0 } else { s + 1 };
            if rng.random_bool(0.5) {
                eb.push([s, t])
            } else {
                mb.push([s, t])
            }
        }
        covered += (el.len() + eb.len()) as u64;
        total += (el.len() + ml.len() + eb.len() + mb.len()) as u64;
        files.insert(
            format!("pkg/m{f}.py"),
            serde_json::json!({"executed_lines": el, "missing_lines": ml, "executed_branches": eb, "missing_branches": mb}),
        );
    }
    (serde_json::json!({ "files": files }).to_string(), covered, total)
}
