//! Text archive of a [`ContinualState`].
//!
//! ```text
//! crisp-checkpoint v1
//! step <t|none>
//! protocol <n_ini> <n_inc> <steps>
//! class_set <ids…>            (one line per step)
//! class_order <ids…>
//! decoder <layers> <d> <d_ff>
//! param <name> / <matrix>     (every decoder parameter)
//! queries / <matrix>
//! segment <task> <start> <len> <frozen>
//! snapshot / <matrix>
//! generator <seed> <scale>
//! pools <n> / <pool>…
//! end
//! ```

use std::fmt::Write as _;
use std::iter::Peekable;
use std::path::Path;

use super::{ClassIncrementalProtocol, ContinualState, QuerySegment, QuerySet};
use crate::decoder::{DecoderLayer, DecoderParam, DecoderStack};
use crate::error::{Error, Result};
use crate::numerics::{format_f64, Matrix};
use crate::prompts::{PromptGenerator, PromptPool};

pub const CHECKPOINT_HEADER: &str = "crisp-checkpoint v1";

fn param_name(key: DecoderParam) -> String {
    match key {
        DecoderParam::Layer(l, name) => format!("layer.{l}.{name}"),
        DecoderParam::ClassBlock(t) => format!("class_block.{t}"),
        DecoderParam::NoObject => "no_object".into(),
        DecoderParam::MaskEmbed => "mask_embed".into(),
    }
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

impl ContinualState {
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        let p = &self.protocol;
        let _ = writeln!(s, "{CHECKPOINT_HEADER}");
        let _ = writeln!(s, "step {}", self.step.map_or("none".to_string(), |t| t.to_string()));
        let _ = writeln!(s, "protocol {} {} {}", p.n_ini, p.n_inc, p.steps);
        for set in &p.class_sets {
            let _ = writeln!(s, "class_set {}", join(set));
        }
        let _ = writeln!(s, "class_order {}", join(&self.class_order));
        let ffn = self.decoder.layers[0].ffn_w1.cols();
        let _ = writeln!(s, "decoder {} {} {ffn}", self.decoder.layers.len(), self.dim());
        for key in self.decoder.param_keys() {
            let _ = writeln!(s, "param {}", param_name(key));
            s.push_str(&self.decoder.param(key).to_text());
        }
        s.push_str("queries\n");
        s.push_str(&self.queries.matrix.to_text());
        for seg in &self.queries.segments {
            let _ = writeln!(s, "segment {} {} {} {}", seg.task, seg.start, seg.len, seg.frozen);
        }
        s.push_str("snapshot\n");
        s.push_str(&self.queries.snapshot.to_text());
        let _ = writeln!(
            s,
            "generator {} {}",
            self.generator.seed(),
            format_f64(self.prompt_scale)
        );
        let _ = writeln!(s, "pools {}", self.pools.len());
        for pool in &self.pools {
            s.push_str(&pool.to_text());
        }
        s.push_str("end\n");
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        match lines.next() {
            Some(CHECKPOINT_HEADER) => {}
            Some(other) => {
                return Err(Error::Parse(format!(
                    "checkpoint header {other:?}, expected {CHECKPOINT_HEADER:?}"
                )))
            }
            None => return Err(Error::Parse("empty checkpoint".into())),
        }
        let step_field = field(&mut lines, "step")?;
        let step = match step_field.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            ["none"] => None,
            [t] => Some(number(t)?),
            _ => return Err(Error::Parse("bad step line".into())),
        };
        let proto = numbers(&field(&mut lines, "protocol")?)?;
        let [n_ini, n_inc, steps] = proto[..] else {
            return Err(Error::Parse("protocol line needs three counts".into()));
        };
        let mut class_sets = Vec::with_capacity(steps);
        for _ in 0..steps {
            class_sets.push(numbers(&field(&mut lines, "class_set")?)?);
        }
        let protocol = ClassIncrementalProtocol {
            n_ini,
            n_inc,
            steps,
            class_sets,
        };
        protocol.validate()?;
        let class_order = numbers(&field(&mut lines, "class_order")?)?;
        let dims = numbers(&field(&mut lines, "decoder")?)?;
        let [num_layers, d, ffn] = dims[..] else {
            return Err(Error::Parse("decoder line needs three counts".into()));
        };
        let blocks = step.map_or(0, |t| t + 1);
        let mut decoder = DecoderStack {
            layers: vec![DecoderLayer::zeros(d, ffn); num_layers],
            class_blocks: vec![Matrix::zeros(0, 0); blocks],
            no_object: Matrix::zeros(d, 1),
            mask_embed: Matrix::zeros(d, d),
        };
        for key in decoder.param_keys() {
            let name = field(&mut lines, "param")?;
            if name != [param_name(key)] {
                return Err(Error::Parse(format!(
                    "expected param {}, found {name:?}",
                    param_name(key)
                )));
            }
            let m = matrix(&mut lines)?;
            let slot = decoder.param_mut(key);
            if !slot.data().is_empty() && slot.shape() != m.shape() {
                return Err(Error::Parse(format!(
                    "param {} has shape {:?}",
                    param_name(key),
                    m.shape()
                )));
            }
            *slot = m;
        }
        if decoder.num_categories() != class_order.len() {
            return Err(Error::Parse("class head width disagrees with class_order".into()));
        }
        expect(&mut lines, "queries")?;
        let q = matrix(&mut lines)?;
        let mut segments = Vec::new();
        while lines.peek().is_some_and(|l| l.starts_with("segment ")) {
            let parts = field(&mut lines, "segment")?;
            let [task, start, len, frozen] = parts.as_slice() else {
                return Err(Error::Parse("segment line needs four fields".into()));
            };
            segments.push(QuerySegment {
                task: number(task)?,
                start: number(start)?,
                len: number(len)?,
                frozen: boolean(frozen)?,
            });
        }
        expect(&mut lines, "snapshot")?;
        let snapshot = matrix(&mut lines)?;
        let queries = QuerySet {
            matrix: q,
            segments,
            snapshot,
        };
        queries.validate()?;
        let gen = field(&mut lines, "generator")?;
        let [seed, scale] = gen.as_slice() else {
            return Err(Error::Parse("generator line needs seed and scale".into()));
        };
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Parse(format!("bad generator seed {seed:?}")))?;
        let prompt_scale: f64 = scale
            .parse()
            .map_err(|_| Error::Parse(format!("bad prompt scale {scale:?}")))?;
        let generator = PromptGenerator::new(seed, d, prompt_scale);
        let n_pools = number(&field(&mut lines, "pools")?.concat())?;
        let mut pools = Vec::with_capacity(n_pools);
        for _ in 0..n_pools {
            pools.push(PromptPool::parse_lines(&mut lines)?);
        }
        expect(&mut lines, "end")?;
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Parse("trailing content after checkpoint".into()));
        }
        Ok(Self {
            protocol,
            decoder,
            queries,
            pools,
            generator,
            prompt_scale,
            class_order,
            step,
        })
    }
}

fn field<'a, I: Iterator<Item = &'a str>>(lines: &mut Peekable<I>, key: &str) -> Result<Vec<String>> {
    let line = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("checkpoint ends before {key:?}")))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(Error::Parse(format!("expected {key:?} line, found {line:?}")));
    }
    Ok(parts.map(str::to_string).collect())
}

fn expect<'a, I: Iterator<Item = &'a str>>(lines: &mut Peekable<I>, key: &str) -> Result<()> {
    if field(lines, key)?.is_empty() {
        Ok(())
    } else {
        Err(Error::Parse(format!("unexpected fields after {key:?}")))
    }
}

fn matrix<'a, I: Iterator<Item = &'a str>>(lines: &mut Peekable<I>) -> Result<Matrix> {
    Matrix::parse_lines(lines).map(|(m, _)| m)
}

fn number(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse(format!("bad count {s:?}")))
}

fn numbers(parts: &[String]) -> Result<Vec<usize>> {
    parts.iter().map(|s| number(s)).collect()
}

fn boolean(s: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse(format!("bad flag {s:?}"))),
    }
}

pub fn save_checkpoint(path: &Path, state: &ContinualState) -> Result<()> {
    std::fs::write(path, state.to_checkpoint()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ContinualState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ContinualState::from_checkpoint(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continual_engine::TrainConfig;

    #[test]
    fn round_trip_is_exact() {
        let protocol = ClassIncrementalProtocol::new(2, 1, 3).unwrap();
        let config = TrainConfig {
            queries_per_category: 2,
            ..TrainConfig::default()
        };
        let mut s = ContinualState::new(protocol, 4, &config).unwrap();
        let empty = ContinualState::from_checkpoint(&s.to_checkpoint()).unwrap();
        assert_eq!(empty, s);
        s.begin_step(0, &config).unwrap();
        s.begin_step(1, &config).unwrap();
        let text = s.to_checkpoint();
        let back = ContinualState::from_checkpoint(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_checkpoint(), text);
    }

    #[test]
    fn rejects_other_versions() {
        let err = ContinualState::from_checkpoint("crisp-checkpoint v2\n").unwrap_err();
        assert!(err.to_string().contains("crisp-checkpoint v1"));
    }
}
