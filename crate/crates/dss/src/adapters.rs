//! Out-of-process and recorded attacks and restorers.
//!
//! Wire format: tensor CSV blocks (see [`crate::formats`]). A restorer
//! receives the masked image block followed by the mask block (`1,H,W`, with
//! entries 0 or 1) on stdin and writes one image block to stdout. An attack receives one
//! image block, with `DSS_LABEL` and `DSS_INDEX` in its environment, and
//! writes one image block back. A nonzero exit status is a failure.

use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Mutex;

use dss_core::attacks::AttackAdapter;
use dss_core::inpaint::{RestoreAdapter, Restorer};
use dss_core::stability::DisruptionMask;
use dss_core::{Classifier, ImageTensor, Tensor};

use crate::error::Result;
use crate::formats::{decode_tensor_blocks, encode_tensor_block, mask_tensor, read_tensors};

/// Runs `argv` with `input` on stdin and returns stdout.
fn run_process(argv: &[String], input: &str, env: &[(&str, String)]) -> std::result::Result<String, String> {
    let (program, args) = argv.split_first().ok_or("empty command")?;
    let mut child = Command::new(program)
        .args(args)
        .envs(env.iter().map(|(k, v)| (*k, v.as_str())))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("cannot start `{program}`: {e}"))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");
    let (out, err) = std::thread::scope(|s| {
        // the child may stop reading early; a broken pipe surfaces through its exit status
        s.spawn(move || {
            let _ = stdin.write_all(input.as_bytes());
        });
        let err = s.spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });
        let mut buf = String::new();
        let read = stdout.read_to_string(&mut buf);
        (read.map(|_| buf), err.join().unwrap_or_default())
    });
    let status = child.wait().map_err(|e| format!("waiting for `{program}`: {e}"))?;
    if !status.success() {
        return Err(format!("`{program}` exited with {status}: {}", err.trim()));
    }
    out.map_err(|e| format!("reading output of `{program}`: {e}"))
}

fn single_tensor(text: &str) -> std::result::Result<Tensor, String> {
    let mut blocks = decode_tensor_blocks(Path::new("<stdout>"), text).map_err(|e| e.to_string())?;
    match (blocks.len(), blocks.first().map(|b| b.1.len())) {
        (1, Some(1)) => Ok(blocks.pop().and_then(|mut b| b.1.pop()).expect("one tensor")),
        _ => Err(format!("expected one tensor block with one row, got {} block(s)", blocks.len())),
    }
}

pub struct SubprocessRestorer {
    pub name: String,
    pub command: Vec<String>,
}

impl RestoreAdapter for SubprocessRestorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn restore(&self, masked: &ImageTensor, mask: &DisruptionMask) -> std::result::Result<Tensor, String> {
        let m = mask_tensor(mask);
        let mut input = encode_tensor_block(masked.shape(), &[masked]);
        input.push_str(&encode_tensor_block(m.shape(), &[&m]));
        single_tensor(&run_process(&self.command, &input, &[])?)
    }
}

pub struct SubprocessAttack {
    pub name: String,
    pub command: Vec<String>,
    pub reentrant: bool,
    lock: Mutex<()>,
}

impl SubprocessAttack {
    pub fn new(name: String, command: Vec<String>, reentrant: bool) -> Self {
        SubprocessAttack { name, command, reentrant, lock: Mutex::new(()) }
    }
}

impl AttackAdapter for SubprocessAttack {
    fn name(&self) -> &str {
        &self.name
    }

    fn reentrant(&self) -> bool {
        self.reentrant
    }

    fn perturb(
        &self,
        _model: &dyn Classifier,
        x: &ImageTensor,
        label: usize,
        index: usize,
    ) -> std::result::Result<Tensor, String> {
        let _guard = if self.reentrant { None } else { Some(self.lock.lock().map_err(|e| e.to_string())?) };
        let env = [("DSS_LABEL", label.to_string()), ("DSS_INDEX", index.to_string())];
        single_tensor(&run_process(&self.command, &encode_tensor_block(x.shape(), &[x]), &env)?)
    }
}

/// Adversarial images computed elsewhere, one per input example, looked up
/// by the example's position.
pub struct RecordedAttack {
    pub name: String,
    pub outputs: Vec<Tensor>,
}

impl RecordedAttack {
    pub fn load(name: String, path: impl AsRef<Path>) -> Result<Self> {
        Ok(RecordedAttack { name, outputs: read_tensors(path)?.1 })
    }
}

impl AttackAdapter for RecordedAttack {
    fn name(&self) -> &str {
        &self.name
    }

    fn perturb(&self, _: &dyn Classifier, _: &ImageTensor, _: usize, index: usize) -> std::result::Result<Tensor, String> {
        self.outputs
            .get(index)
            .cloned()
            .ok_or_else(|| format!("no recorded output for example {index} ({} recorded)", self.outputs.len()))
    }
}

/// Replays restorations captured from another restorer, in call order.
pub struct RecordedRestorer {
    pub name: String,
    outputs: Vec<Tensor>,
    next: Mutex<usize>,
}

impl RecordedRestorer {
    pub fn new(name: String, outputs: Vec<Tensor>) -> Self {
        RecordedRestorer { name, outputs, next: Mutex::new(0) }
    }

    pub fn load(name: String, path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(name, read_tensors(path)?.1))
    }
}

impl RestoreAdapter for RecordedRestorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn restore(&self, _: &ImageTensor, _: &DisruptionMask) -> std::result::Result<Tensor, String> {
        let mut next = self.next.lock().map_err(|e| e.to_string())?;
        let out = self.outputs.get(*next).cloned().ok_or("recorded restorations exhausted")?;
        *next += 1;
        Ok(out)
    }
}

/// Wraps a restorer and keeps a copy of every output.
pub struct RecordingRestorer<R> {
    pub inner: R,
    pub outputs: Mutex<Vec<Tensor>>,
}

impl<R: Restorer> RecordingRestorer<R> {
    pub fn new(inner: R) -> Self {
        RecordingRestorer { inner, outputs: Mutex::new(Vec::new()) }
    }

    pub fn into_outputs(self) -> Vec<Tensor> {
        self.outputs.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

impl<R: Restorer> Restorer for RecordingRestorer<R> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn restore(&self, masked: &ImageTensor, mask: &DisruptionMask) -> dss_core::Result<ImageTensor> {
        let out = self.inner.restore(masked, mask)?;
        self.outputs.lock().unwrap_or_else(|p| p.into_inner()).push(out.as_tensor().clone());
        Ok(out)
    }
}
