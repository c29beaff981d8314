//! External generator process: one prompt per input line, one completed
//! sentence per output line.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use crate::error::{Error, Result};

struct Pipes {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct PluginLm {
    command: String,
    pipes: Mutex<Pipes>,
}

impl PluginLm {
    /// Launches `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Plugin(format!("cannot launch `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout piped"));
        Ok(PluginLm {
            command: command.to_string(),
            pipes: Mutex::new(Pipes {
                child,
                stdin,
                stdout,
            }),
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    /// Sends one prompt and reads back one sentence.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        if prompt.contains('\n') {
            return Err(Error::Plugin("prompt contains a newline".into()));
        }
        let mut p = self.pipes.lock().map_err(|_| Error::Plugin("plugin lock poisoned".into()))?;
        let fail = |what: &str, e: std::io::Error| Error::Plugin(format!("{what} `{}`: {e}", self.command));
        writeln!(p.stdin, "{prompt}").map_err(|e| fail("writing to", e))?;
        p.stdin.flush().map_err(|e| fail("writing to", e))?;
        let mut line = String::new();
        let n = p.stdout.read_line(&mut line).map_err(|e| fail("reading from", e))?;
        if n == 0 {
            return Err(Error::Plugin(format!(
                "`{}` closed its output before answering",
                self.command
            )));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    }
}

impl Drop for PluginLm {
    fn drop(&mut self) {
        if let Ok(p) = self.pipes.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_plugin_round_trip() {
        let p = PluginLm::spawn("while IFS= read -r l; do echo \"${l}X is 1\"; done").unwrap();
        assert_eq!(p.complete("A is b, ").unwrap(), "A is b, X is 1");
        assert_eq!(p.complete("").unwrap(), "X is 1");
    }

    #[test]
    fn dead_plugin_is_an_error() {
        let p = PluginLm::spawn("exit 0").unwrap();
        assert!(matches!(p.complete("A is "), Err(Error::Plugin(_))));
    }
}
