//! Yes/no relationship judges used to filter training and test pairs.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ItemId, RelationType};
use crate::synth::GroundTruth;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Yes,
    No,
}

/// Decides whether two items hold a relationship.
///
/// Implementations must be deterministic for fixed inputs. An `Err` marks a
/// failed query; callers skip the pair rather than abort.
pub trait Judge {
    fn judge(&mut self, a: ItemId, b: ItemId, relation: RelationType) -> Result<Verdict>;
}

/// Answers from planted ground truth.
pub struct OracleJudge {
    truth: GroundTruth,
}

impl OracleJudge {
    pub fn new(truth: GroundTruth) -> Self {
        Self { truth }
    }
}

impl Judge for OracleJudge {
    fn judge(&mut self, a: ItemId, b: ItemId, relation: RelationType) -> Result<Verdict> {
        if a >= self.truth.n_items() || b >= self.truth.n_items() {
            return Err(Error::Judge(format!("pair ({a}, {b}) outside the ground truth")));
        }
        Ok(if self.truth.contains(a, b, relation) {
            Verdict::Yes
        } else {
            Verdict::No
        })
    }
}

/// Returns the same verdict for every pair.
pub struct ConstantJudge(pub Verdict);

impl Judge for ConstantJudge {
    fn judge(&mut self, _: ItemId, _: ItemId, _: RelationType) -> Result<Verdict> {
        Ok(self.0)
    }
}

#[derive(Serialize)]
struct Request<'a> {
    id: u64,
    relation: &'a str,
    text_a: &'a str,
    text_b: &'a str,
}

#[derive(Deserialize)]
struct Response {
    id: u64,
    verdict: String,
}

/// Talks to a child process over line-delimited JSON on its standard streams.
///
/// Each request is `{"id", "relation", "text_a", "text_b"}` on one line; the
/// child answers with `{"id", "verdict"}` where the verdict is `yes` or `no`.
pub struct ExternalJudge {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    texts: Vec<String>,
    next_id: u64,
}

impl ExternalJudge {
    /// Spawns `program` with `args`. `texts[i]` describes item `i`.
    pub fn spawn(program: &str, args: &[String], texts: Vec<String>) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Judge(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdin,
            stdout,
            texts,
            next_id: 0,
        })
    }

    fn text(&self, item: ItemId) -> String {
        self.texts.get(item).cloned().unwrap_or_else(|| format!("item {item}"))
    }
}

impl Judge for ExternalJudge {
    fn judge(&mut self, a: ItemId, b: ItemId, relation: RelationType) -> Result<Verdict> {
        let id = self.next_id;
        self.next_id += 1;
        let (ta, tb) = (self.text(a), self.text(b));
        let req = Request {
            id,
            relation: relation.name(),
            text_a: &ta,
            text_b: &tb,
        };
        let line = serde_json::to_string(&req).map_err(|e| Error::Judge(e.to_string()))?;
        writeln!(self.stdin, "{line}").map_err(|e| Error::Judge(format!("write failed: {e}")))?;
        self.stdin.flush().map_err(|e| Error::Judge(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Judge(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::Judge("judge process closed its output".into()));
        }
        let resp: Response =
            serde_json::from_str(reply.trim()).map_err(|e| Error::Judge(format!("bad response {reply:?}: {e}")))?;
        if resp.id != id {
            return Err(Error::Judge(format!("response id {} for request {id}", resp.id)));
        }
        match resp.verdict.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(Verdict::Yes),
            "no" => Ok(Verdict::No),
            other => Err(Error::Judge(format!("verdict {other:?} is neither yes nor no"))),
        }
    }
}

impl Drop for ExternalJudge {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_judges() {
        assert_eq!(
            ConstantJudge(Verdict::Yes).judge(0, 1, RelationType::Complementary).unwrap(),
            Verdict::Yes
        );
        assert_eq!(
            ConstantJudge(Verdict::No).judge(0, 1, RelationType::Substitutable).unwrap(),
            Verdict::No
        );
    }

    #[cfg(unix)]
    #[test]
    fn external_judge_round_trip() {
        // Echo the id back and always agree.
        let script = r#"while read -r line; do id=$(printf '%s' "$line" | sed 's/.*"id":\([0-9]*\).*/\1/'); printf '{"id":%s,"verdict":"yes"}\n' "$id"; done"#;
        let mut j = ExternalJudge::spawn("sh", &["-c".into(), script.into()], vec!["a".into(), "b".into()]).unwrap();
        for _ in 0..3 {
            assert_eq!(j.judge(0, 1, RelationType::Substitutable).unwrap(), Verdict::Yes);
        }
    }

    #[cfg(unix)]
    #[test]
    fn external_judge_failure_is_an_error() {
        let mut j = ExternalJudge::spawn("sh", &["-c".into(), "read -r x; echo nonsense".into()], vec![]).unwrap();
        assert!(matches!(j.judge(0, 1, RelationType::Complementary), Err(Error::Judge(_))));
    }
}
