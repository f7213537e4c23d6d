//! Versioned text checkpoints: config echo, RNG state and named tensors as
//! hexadecimal IEEE-754 words.

use std::fmt::Write as _;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, RunConfig};

pub const MAGIC: &str = "bkrnet-checkpoint";
pub const VERSION: u32 = 1;
const WORDS_PER_LINE: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    Magic,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: String },
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("embedded config: {0}")]
    Config(#[from] ConfigError),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub rng: RngState,
    pub round: usize,
    /// Trainable tensors in model order.
    pub params: Vec<Section>,
    /// Non-trainable run state such as collocation points.
    pub state: Vec<Section>,
}

impl Checkpoint {
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|s| s.values.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.iter().find(|s| s.name == name).map(|s| &s.values)
    }

    pub fn state(&self, name: &str) -> Option<&Array2<f64>> {
        self.state.iter().find(|s| s.name == name).map(|s| &s.values)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "version = {VERSION}");
        let _ = writeln!(s, "round = {}", self.round);
        let seed: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(s, "rng.seed = {seed}");
        let _ = writeln!(s, "rng.stream = {}", self.rng.stream);
        let _ = writeln!(s, "rng.word_pos = {}", self.rng.word_pos);
        s.push_str("[config]\n");
        s.push_str(&self.config.to_text());
        for (kind, sections) in [("param", &self.params), ("state", &self.state)] {
            for sec in sections {
                let (r, c) = sec.values.dim();
                let _ = writeln!(s, "[{kind} {} {r} {c}]", sec.name);
                let words: Vec<String> = sec.values.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
                for line in words.chunks(WORDS_PER_LINE) {
                    s.push_str(&line.join(" "));
                    s.push('\n');
                }
            }
        }
        s.push_str("[end]\n");
        s
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate().peekable();
        let corrupt = |line: usize, message: &str| CheckpointError::Corrupt {
            line: line + 1,
            message: message.to_string(),
        };
        if lines.next().map(|(_, l)| l) != Some(MAGIC) {
            return Err(CheckpointError::Magic);
        }
        let mut header = |key: &str| -> Result<(usize, String), CheckpointError> {
            let (i, line) = lines.next().ok_or_else(|| corrupt(0, "truncated header"))?;
            match line.split_once(" = ") {
                Some((k, v)) if k == key => Ok((i, v.to_string())),
                _ => Err(corrupt(i, &format!("expected `{key} = ...`"))),
            }
        };
        let (_, version) = header("version")?;
        if version != VERSION.to_string() {
            return Err(CheckpointError::Version { found: version });
        }
        let num = |(i, v): (usize, String)| -> Result<u128, CheckpointError> {
            v.parse().map_err(|_| corrupt(i, "expected an integer"))
        };
        let round = num(header("round")?)? as usize;
        let (i, hex) = header("rng.seed")?;
        let mut seed = [0u8; 32];
        if hex.len() != 64 {
            return Err(corrupt(i, "seed must have 64 hex digits"));
        }
        for (k, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * k..2 * k + 2], 16).map_err(|_| corrupt(i, "bad seed digit"))?;
        }
        let stream = num(header("rng.stream")?)? as u64;
        let word_pos = num(header("rng.word_pos")?)?;
        match lines.next() {
            Some((_, "[config]")) => {}
            Some((i, _)) => return Err(corrupt(i, "expected [config]")),
            None => return Err(corrupt(0, "truncated before config")),
        }
        let mut config_text = String::new();
        while let Some((_, l)) = lines.peek() {
            if l.starts_with('[') {
                break;
            }
            config_text.push_str(l);
            config_text.push('\n');
            lines.next();
        }
        let config = RunConfig::parse(&config_text)?;
        let (mut params, mut state) = (Vec::new(), Vec::new());
        loop {
            let (i, head) = lines.next().ok_or_else(|| corrupt(0, "missing [end]"))?;
            if head == "[end]" {
                break;
            }
            let inner = head
                .strip_prefix('[')
                .and_then(|h| h.strip_suffix(']'))
                .ok_or_else(|| corrupt(i, "expected a section header"))?;
            let parts: Vec<&str> = inner.split(' ').collect();
            let [kind, name, r, c] = parts[..] else {
                return Err(corrupt(i, "section header needs kind, name, rows, cols"));
            };
            let r: usize = r.parse().map_err(|_| corrupt(i, "bad row count"))?;
            let c: usize = c.parse().map_err(|_| corrupt(i, "bad column count"))?;
            let mut values = Vec::with_capacity(r * c);
            while values.len() < r * c {
                let (j, l) = lines.next().ok_or_else(|| corrupt(i, "truncated tensor"))?;
                for w in l.split(' ') {
                    let bits = u64::from_str_radix(w, 16).map_err(|_| corrupt(j, "bad hex word"))?;
                    if w.len() != 16 {
                        return Err(corrupt(j, "hex words have 16 digits"));
                    }
                    values.push(f64::from_bits(bits));
                }
            }
            if values.len() != r * c {
                return Err(corrupt(i, "tensor has extra values"));
            }
            let sec = Section {
                name: name.to_string(),
                values: Array2::from_shape_vec((r, c), values).expect("length checked"),
            };
            match kind {
                "param" => params.push(sec),
                "state" => state.push(sec),
                _ => return Err(corrupt(i, "section kind must be param or state")),
            }
        }
        if let Some((i, _)) = lines.next() {
            return Err(corrupt(i, "content after [end]"));
        }
        Ok(Self {
            config,
            rng: RngState { seed, stream, word_pos },
            round,
            params,
            state,
        })
    }
}

/// Pairs tensors with their names.
pub fn sections(names: Vec<String>, tensors: Vec<&Array2<f64>>) -> Vec<Section> {
    names
        .into_iter()
        .zip(tensors)
        .map(|(name, t)| Section {
            name,
            values: t.clone(),
        })
        .collect()
}

/// Copies checkpoint tensors into `targets`, matched by name and shape.
pub fn load_into(
    ck: &Checkpoint,
    prefix: &str,
    names: Vec<String>,
    targets: Vec<&mut Array2<f64>>,
) -> Result<(), CheckpointError> {
    for (name, t) in names.into_iter().zip(targets) {
        let full = format!("{prefix}{name}");
        let src = ck.param(&full).ok_or_else(|| CheckpointError::Tensor {
            name: full.clone(),
            message: "missing".into(),
        })?;
        if src.dim() != t.dim() {
            return Err(CheckpointError::Tensor {
                name: full,
                message: format!("shape {:?} does not match model shape {:?}", src.dim(), t.dim()),
            });
        }
        t.assign(src);
    }
    Ok(())
}
