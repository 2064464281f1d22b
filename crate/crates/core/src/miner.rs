//! Extracts (docstring, implementation) pairs from Python and JavaScript
//! sources with a line/character scanner rather than a full parser.
//!
//! Python: a top-level `def` (optionally `async`, optionally decorated) whose
//! first body statement is a string literal. JavaScript: a `/** ... */` block
//! immediately followed by a top-level `function` declaration (optionally
//! `async`, `export` or `export default`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Python,
    JavaScript,
}

impl Language {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "py" => Some(Language::Python),
            "js" | "mjs" | "cjs" => Some(Language::JavaScript),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinedPair {
    pub docstring: String,
    pub code: String,
    pub source_path: String,
    pub language: Language,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MineReport {
    pub pairs: Vec<MinedPair>,
    /// Files that could not be scanned, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Removes common leading whitespace and surrounding blank lines.
fn dedent(lines: &[&str]) -> String {
    let indent = lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.len() - l.trim_start().len())
        .min()
        .unwrap_or(0);
    let body: Vec<&str> = lines
        .iter()
        .map(|l| if l.len() >= indent { &l[indent..] } else { l.trim_start() })
        .map(str::trim_end)
        .collect();
    let start = body.iter().position(|l| !l.is_empty()).unwrap_or(body.len());
    let end = body.iter().rposition(|l| !l.is_empty()).map_or(start, |e| e + 1);
    body[start..end].join("\n")
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

/// Tracks whether each line starts inside a triple-quoted string.
fn python_string_state(lines: &[&str]) -> Result<Vec<bool>> {
    let mut inside: Option<&str> = None;
    let mut out = Vec::with_capacity(lines.len());
    for (no, line) in lines.iter().enumerate() {
        out.push(inside.is_some());
        let mut rest: &str = line;
        loop {
            match inside {
                Some(q) => match rest.find(q) {
                    Some(i) => {
                        rest = &rest[i + 3..];
                        inside = None;
                    }
                    None => break,
                },
                None => {
                    let code = match rest.find('#') {
                        Some(h) if !rest[..h].contains(['"', '\'']) => &rest[..h],
                        _ => rest,
                    };
                    let next = ["\"\"\"", "'''"]
                        .iter()
                        .filter_map(|q| code.find(q).map(|i| (i, *q)))
                        .min();
                    match next {
                        Some((i, q)) => {
                            rest = &rest[i + 3..];
                            inside = Some(q);
                        }
                        None => break,
                    }
                }
            }
        }
        if no + 1 == lines.len() && inside.is_some() {
            return Err(Error::Data("unterminated triple-quoted string".into()));
        }
    }
    Ok(out)
}

/// Parses a docstring starting at `lines[0]` (already stripped of indentation
/// by the caller). Returns the text and the number of lines it spans.
fn python_docstring(lines: &[&str]) -> Result<Option<(String, usize)>> {
    let first = lines[0].trim_start();
    let after_prefix = first.trim_start_matches(['r', 'R', 'u', 'U']);
    if after_prefix.len() == first.len() && !first.starts_with(['"', '\'']) {
        return Ok(None);
    }
    for q in ["\"\"\"", "'''"] {
        if let Some(rest) = after_prefix.strip_prefix(q) {
            if let Some(end) = rest.find(q) {
                return Ok(Some((rest[..end].trim().to_string(), 1)));
            }
            let mut parts = vec![rest];
            for (i, l) in lines.iter().enumerate().skip(1) {
                if let Some(end) = l.find(q) {
                    parts.push(&l[..end]);
                    let head = parts[0].trim();
                    let text = if head.is_empty() {
                        dedent(&parts[1..])
                    } else {
                        // Keep the first line so dedent preserves a blank line after the summary.
                        let mut all = vec![head];
                        all.extend(&parts[1..]);
                        let tail = dedent(&all[1..]);
                        let gap = all[1..].iter().take_while(|l| l.trim().is_empty()).count();
                        match tail.is_empty() {
                            true => head.to_string(),
                            false => format!("{head}\n{}{tail}", "\n".repeat(gap)),
                        }
                    };
                    return Ok(Some((text, i + 1)));
                }
                parts.push(l);
            }
            return Err(Error::Data("unterminated docstring".into()));
        }
    }
    for q in ['"', '\''] {
        if let Some(rest) = after_prefix.strip_prefix(q) {
            return match rest.find(q) {
                Some(end) => Ok(Some((rest[..end].trim().to_string(), 1))),
                None => Err(Error::Data("unterminated string literal".into())),
            };
        }
    }
    Ok(None)
}

pub fn mine_python(source: &str, source_path: &str) -> Result<Vec<MinedPair>> {
    let lines: Vec<&str> = source.lines().collect();
    let in_string = python_string_state(&lines)?;
    let top_level = |i: usize| !in_string[i] && !lines[i].trim().is_empty() && indent_of(lines[i]) == 0;
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        let is_def = top_level(i) && (line.starts_with("def ") || line.starts_with("async def "));
        if !is_def {
            i += 1;
            continue;
        }
        let mut start = i;
        while start > 0 && top_level(start - 1) && lines[start - 1].starts_with('@') {
            start -= 1;
        }
        // Signature ends at the first line whose paren depth returns to zero with a trailing colon.
        let mut depth: i32 = 0;
        let mut sig_end = None;
        for (j, l) in lines.iter().enumerate().skip(i) {
            depth += l.matches(['(', '[', '{']).count() as i32 - l.matches([')', ']', '}']).count() as i32;
            if depth <= 0 && l.split('#').next().unwrap_or("").trim_end().ends_with(':') {
                sig_end = Some(j);
                break;
            }
        }
        let sig_end = sig_end.ok_or_else(|| Error::Data(format!("line {}: unterminated def signature", i + 1)))?;
        let mut end = sig_end + 1;
        while end < lines.len() && !top_level(end) {
            end += 1;
        }
        let body = &lines[sig_end + 1..end];
        let first_stmt = body.iter().position(|l| !l.trim().is_empty());
        let doc = match first_stmt {
            Some(f) => python_docstring(&body[f..])?.map(|(text, span)| (f, span, text)),
            None => None,
        };
        if let Some((f, span, text)) = doc {
            let mut code_lines: Vec<&str> = lines[start..=sig_end].to_vec();
            code_lines.extend(&body[..f]);
            code_lines.extend(&body[f + span..]);
            let has_body = body[f + span..]
                .iter()
                .any(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
            while code_lines.last().is_some_and(|l| l.trim().is_empty()) {
                code_lines.pop();
            }
            if !text.is_empty() && has_body {
                pairs.push(MinedPair {
                    docstring: text,
                    code: code_lines.join("\n"),
                    source_path: source_path.to_string(),
                    language: Language::Python,
                });
            }
        }
        i = end;
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum JsToken {
    /// `/** ... */` at depth 0: byte range of the whole comment.
    DocComment(usize, usize),
    /// Any other code character at depth 0, with its byte offset.
    Code(usize),
}

/// A `/` starts a regex literal when it cannot be a division operator.
fn regex_allowed(before: &str) -> bool {
    let t = before.trim_end();
    match t.chars().last() {
        None => true,
        Some(c) if "(,=:[!&|?{};+-*%<>~^".contains(c) => true,
        Some(_) => ["return", "typeof", "case", "do", "else", "in", "of", "void", "yield", "await"]
            .iter()
            .any(|k| t.ends_with(k) && !t[..t.len() - k.len()].ends_with(|c: char| c.is_alphanumeric() || c == '_' || c == '$')),
    }
}

/// Walks the source once, tracking strings, comments and brace depth.
/// Returns depth-0 tokens and, for each `{` at depth 0, the offset just past
/// its matching `}`.
fn js_scan(src: &str) -> Result<(Vec<JsToken>, std::collections::BTreeMap<usize, usize>)> {
    let b = src.as_bytes();
    let mut tokens = Vec::new();
    let mut closes = std::collections::BTreeMap::new();
    let mut depth = 0usize;
    let mut open_at = 0usize;
    let mut i = 0;
    let line_of = |pos: usize| src[..pos].matches('\n').count() + 1;
    while i < b.len() {
        let c = b[i];
        match c {
            b'/' if b.get(i + 1) == Some(&b'/') => {
                while i < b.len() && b[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            b'/' if b.get(i + 1) == Some(&b'*') => {
                let end = src[i + 2..]
                    .find("*/")
                    .map(|e| i + 2 + e + 2)
                    .ok_or_else(|| Error::Data(format!("line {}: unterminated block comment", line_of(i))))?;
                let is_doc = b.get(i + 2) == Some(&b'*') && end - i > 4;
                if depth == 0 && is_doc {
                    tokens.push(JsToken::DocComment(i, end));
                }
                i = end;
                continue;
            }
            b'/' if regex_allowed(&src[..i]) => {
                let start = i;
                let mut in_class = false;
                i += 1;
                while i < b.len() && (b[i] != b'/' || in_class) {
                    match b[i] {
                        b'\\' => i += 1,
                        b'[' => in_class = true,
                        b']' => in_class = false,
                        b'\n' => return Err(Error::Data(format!("line {}: unterminated regex", line_of(start)))),
                        _ => {}
                    }
                    i += 1;
                }
                if i >= b.len() {
                    return Err(Error::Data(format!("line {}: unterminated regex", line_of(start))));
                }
                if depth == 0 {
                    tokens.push(JsToken::Code(start));
                }
                i += 1;
                continue;
            }
            b'"' | b'\'' | b'`' => {
                let start = i;
                i += 1;
                while i < b.len() && b[i] != c {
                    if b[i] == b'\\' {
                        i += 1;
                    } else if c != b'`' && b[i] == b'\n' {
                        return Err(Error::Data(format!("line {}: unterminated string", line_of(start))));
                    }
                    i += 1;
                }
                if i >= b.len() {
                    return Err(Error::Data(format!("line {}: unterminated string", line_of(start))));
                }
                if depth == 0 {
                    tokens.push(JsToken::Code(start));
                }
                i += 1;
                continue;
            }
            b'{' => {
                if depth == 0 {
                    tokens.push(JsToken::Code(i));
                    open_at = i;
                }
                depth += 1;
            }
            b'}' => {
                if depth == 0 {
                    return Err(Error::Data(format!("line {}: unbalanced '}}'", line_of(i))));
                }
                depth -= 1;
                if depth == 0 {
                    closes.insert(open_at, i + 1);
                }
            }
            c if c.is_ascii_whitespace() => {}
            _ => {
                if depth == 0 {
                    tokens.push(JsToken::Code(i));
                }
            }
        }
        i += 1;
    }
    if depth != 0 {
        return Err(Error::Data("unbalanced braces at end of file".into()));
    }
    Ok((tokens, closes))
}

fn jsdoc_text(comment: &str) -> String {
    let inner = &comment[3..comment.len() - 2];
    let lines: Vec<&str> = inner
        .lines()
        .map(|l| {
            let t = l.trim_start();
            match t.strip_prefix('*') {
                Some(rest) => rest.strip_prefix(' ').unwrap_or(rest),
                None => t,
            }
        })
        .collect();
    dedent(&lines)
}

fn starts_function(rest: &str) -> bool {
    let mut s = rest;
    for prefix in ["export ", "default ", "async "] {
        if let Some(r) = s.strip_prefix(prefix) {
            s = r.trim_start();
        }
    }
    s.strip_prefix("function")
        .is_some_and(|r| r.starts_with([' ', '*', '(']))
}

pub fn mine_javascript(source: &str, source_path: &str) -> Result<Vec<MinedPair>> {
    let (tokens, closes) = js_scan(source)?;
    let mut pairs = Vec::new();
    for (t, tok) in tokens.iter().enumerate() {
        let JsToken::DocComment(cs, ce) = *tok else { continue };
        let Some(JsToken::Code(fs)) = tokens.get(t + 1).copied() else { continue };
        if !source[ce..fs].trim().is_empty() || !starts_function(&source[fs..]) {
            continue;
        }
        let body_open = tokens[t + 1..].iter().find_map(|tk| match *tk {
            JsToken::Code(p) if source.as_bytes()[p] == b'{' => Some(p),
            _ => None,
        });
        let Some(open) = body_open else { continue };
        let Some(&close) = closes.get(&open) else { continue };
        let docstring = jsdoc_text(&source[cs..ce]);
        let code = source[fs..close].to_string();
        let has_body = !source[open + 1..close - 1].trim().is_empty();
        if !docstring.is_empty() && has_body {
            pairs.push(MinedPair {
                docstring,
                code,
                source_path: source_path.to_string(),
                language: Language::JavaScript,
            });
        }
    }
    Ok(pairs)
}

pub fn mine_source(source: &str, language: Language, source_path: &str) -> Result<Vec<MinedPair>> {
    match language {
        Language::Python => mine_python(source, source_path),
        Language::JavaScript => mine_javascript(source, source_path),
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if Language::from_path(&path).is_some() {
            out.push(path);
        }
    }
    Ok(())
}

/// Mines every supported file under `inputs` (files or directories). Pairs
/// are ordered by path, then position. `source_path` is relative to `root`
/// when given, with `/` separators.
pub fn mine_code_pairs(inputs: &[PathBuf], root: Option<&Path>) -> Result<MineReport> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            collect_files(p, &mut files)?;
        } else if Language::from_path(p).is_some() {
            files.push(p.clone());
        } else {
            return Err(Error::invalid(format!("{} is not a .py or .js file", p.display())));
        }
    }
    let display = |p: &Path| {
        let rel = root.and_then(|r| p.strip_prefix(r).ok()).unwrap_or(p);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    };
    let mut named: Vec<(String, PathBuf)> = files.into_iter().map(|p| (display(&p), p)).collect();
    named.sort();
    named.dedup();
    let mut report = MineReport::default();
    for (name, path) in named {
        let lang = Language::from_path(&path).expect("filtered above");
        let text = match fs::read(&path) {
            Ok(bytes) => String::from_utf8(bytes).map_err(|_| Error::Data("not UTF-8".into())),
            Err(e) => Err(Error::io(&path, e)),
        };
        match text.and_then(|t| mine_source(&t, lang, &name)) {
            Ok(pairs) => report.pairs.extend(pairs),
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                report.skipped.push((name, e.to_string()));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn python_basic_pair() {
        let src = "def add(a, b):\n    \"\"\"Adds two numbers.\"\"\"\n    return a + b\n";
        let pairs = mine_python(src, "m.py").unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].docstring, "Adds two numbers.");
        assert_eq!(pairs[0].code, "def add(a, b):\n    return a + b");
    }

    #[test]
    fn python_skips_undocumented_nested_and_methods() {
        let src = "\
def plain(x):
    return x

class K:
    def method(self):
        \"\"\"Not top level.\"\"\"
        return 1

def outer():
    \"\"\"Outer doc.\"\"\"
    def inner():
        \"\"\"Inner doc.\"\"\"
        return 2
    return inner
";
        let pairs = mine_python(src, "m.py").unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].docstring, "Outer doc.");
        assert!(pairs[0].code.contains("Inner doc."));
    }

    #[test]
    fn python_multiline_docstring_decorator_and_signature() {
        let src = "\
@cache
def f(
    a,
    b,
):
    '''Summary line.

        Indented detail.
    More.
    '''
    return a
";
        let p = &mine_python(src, "m.py").unwrap()[0];
        assert_eq!(p.docstring, "Summary line.\n\n    Indented detail.\nMore.");
        assert_eq!(p.code, "@cache\ndef f(\n    a,\n    b,\n):\n    return a");
    }

    #[test]
    fn python_string_containing_def_is_ignored() {
        let src = "X = \"\"\"\ndef fake():\n    \"doc\"\n\"\"\"\n";
        assert!(mine_python(src, "m.py").unwrap().is_empty());
    }

    #[test]
    fn python_docstring_only_body_is_skipped() {
        assert!(mine_python("def f():\n    \"\"\"Doc.\"\"\"\n", "m.py").unwrap().is_empty());
    }

    #[test]
    fn python_unterminated_is_error() {
        assert!(mine_python("def f():\n    \"\"\"Doc\n    return 1\n", "m.py").is_err());
    }

    #[test]
    fn javascript_basic_pair() {
        let src = "/**\n * Adds two numbers.\n * @param {number} a\n */\nfunction add(a, b) {\n  return a + b;\n}\n";
        let pairs = mine_javascript(src, "m.js").unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].docstring, "Adds two numbers.\n@param {number} a");
        assert_eq!(pairs[0].code, "function add(a, b) {\n  return a + b;\n}");
    }

    #[test]
    fn javascript_skips_plain_comments_nested_and_gaps() {
        let src = "\
/* not jsdoc */
function a() { return 1; }
/** Detached. */
const x = 1;
function b() { return 2; }
function c() {
  /** Nested doc. */
  function d() { return '}'; }
  return d;
}
/** Exported. */
export async function e() { return `{${x}}`; }
";
        let pairs = mine_javascript(src, "m.js").unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].docstring, "Exported.");
        assert_eq!(pairs[0].code, "export async function e() { return `{${x}}`; }");
    }

    #[test]
    fn javascript_unbalanced_is_error() {
        assert!(mine_javascript("function f() {\n", "m.js").is_err());
        assert!(mine_javascript("let s = 'abc\n", "m.js").is_err());
    }
}
