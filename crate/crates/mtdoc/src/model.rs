//! Model configuration, parameter layout and initialization.

use crate::docdata::PATCH;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Model width d; divisible by 4 (coordinate embedding quarters) and by
    /// `heads`.
    pub dim: usize,
    /// Backbone depth L.
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    /// Document classification output classes.
    pub classes: usize,
    pub channels: usize,
    pub max_text_len: usize,
    /// Extra RoBERTa-style global 1D position on top of box+seq positions.
    /// Off by default; kept as an ablation hook.
    pub global_pos: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
            vocab_size: 0,
            classes: 4,
            channels: 1,
            max_text_len: 512,
            global_pos: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!("dim {} not divisible by 4", self.dim)));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size is zero".into()));
        }
        Ok(())
    }

    pub fn patch_input(&self) -> usize {
        PATCH * PATCH * self.channels
    }
}

/// All named parameter tensors plus the configuration they realize.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Decoder depth per generation head: De1 (relations) and De2 (segment
/// text) use two layers, De3 (VQA) uses three.
pub fn decoder_depth(head: &str) -> usize {
    if head == "head.de3" {
        3
    } else {
        2
    }
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct Builder {
    params: ParamSet,
    rng: ChaCha8Rng,
    std: f64,
}

impl Builder {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) {
        let v = (0..rows * cols).map(|_| randn(&mut self.rng) * self.std).collect();
        self.params.insert(name, v, vec![rows, cols]);
    }

    fn vector(&mut self, name: &str, len: usize) {
        let v = (0..len).map(|_| randn(&mut self.rng) * self.std).collect();
        self.params.insert(name, v, vec![len]);
    }

    fn zeros(&mut self, name: &str, len: usize) {
        self.params.insert(name, vec![0.0; len], vec![len]);
    }

    fn ones(&mut self, name: &str, len: usize) {
        self.params.insert(name, vec![1.0; len], vec![len]);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.ones(&format!("{prefix}.gain"), d);
        self.zeros(&format!("{prefix}.bias"), d);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for w in ["wq", "wk", "wv", "wo"] {
            self.weight(&format!("{prefix}.{w}"), d, d);
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ffn: usize) {
        self.weight(&format!("{prefix}.w1"), d, ffn);
        self.zeros(&format!("{prefix}.b1"), ffn);
        self.weight(&format!("{prefix}.w2"), ffn, d);
        self.zeros(&format!("{prefix}.b2"), d);
    }

    /// One transformer block: attention + two layer norms + FFN.
    fn block(&mut self, prefix: &str, d: usize, ffn: usize) {
        self.attention(&format!("{prefix}.attn"), d);
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.ffn(&format!("{prefix}.ffn"), d, ffn);
        self.layer_norm(&format!("{prefix}.ln2"), d);
    }

    /// One decoder layer: causal self-attention, cross-attention, FFN.
    fn decoder_layer(&mut self, prefix: &str, d: usize, ffn: usize) {
        self.attention(&format!("{prefix}.self"), d);
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.attention(&format!("{prefix}.cross"), d);
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.ffn(&format!("{prefix}.ffn"), d, ffn);
        self.layer_norm(&format!("{prefix}.ln3"), d);
    }
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut b = Builder {
            params: ParamSet::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: 0.02,
        };

        b.weight("embed.word", config.vocab_size, d);
        for coord in ["x1", "y1", "x2", "y2"] {
            b.weight(&format!("embed.coord.{coord}"), 513, d / 4);
        }
        b.weight("embed.seq", 513, d);
        if config.global_pos {
            b.weight("embed.global", 1024, d);
        }
        b.weight("embed.patch.weight", config.patch_input(), d);
        b.zeros("embed.patch.bias", d);

        for i in 0..config.layers {
            b.block(&format!("backbone.layer{i}"), d, config.ffn);
        }

        b.block("head.en1", d, config.ffn);
        b.weight("head.en1.out.weight", d, config.classes);
        b.zeros("head.en1.out.bias", config.classes);

        b.block("head.en2", d, config.ffn);
        b.weight("head.en2.out.weight", d, 5);
        b.zeros("head.en2.out.bias", 5);

        b.block("head.en3", d, config.ffn);
        b.weight("head.en3.score.wq", d, d);
        b.weight("head.en3.score.wk", d, d);
        b.vector("head.en3.start", d);

        for head in ["head.de1", "head.de2", "head.de3"] {
            for l in 0..decoder_depth(head) {
                b.decoder_layer(&format!("{head}.layer{l}"), d, config.ffn);
            }
        }

        Ok(ModelState {
            config,
            params: b.params,
        })
    }

    /// Leases a named parameter onto a tape.
    pub fn lease(&self, tape: &Tape, name: &str) -> Result<Var> {
        let p = self.params.get(name)?;
        tape.param(name, &p.values, &p.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            vocab_size: 10,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelState::init(cfg(), 3).unwrap();
        let b = ModelState::init(cfg(), 3).unwrap();
        assert_eq!(a.params.params.len(), b.params.params.len());
        for (name, p) in &a.params.params {
            assert_eq!(p.values, b.params.params[name].values, "{name}");
        }
    }

    #[test]
    fn rejects_bad_dims() {
        let mut c = cfg();
        c.dim = 6;
        assert!(ModelState::init(c, 0).is_err());
        let mut c = cfg();
        c.vocab_size = 0;
        assert!(ModelState::init(c, 0).is_err());
    }

    #[test]
    fn parameter_groups_exist() {
        let m = ModelState::init(cfg(), 0).unwrap();
        for prefix in [
            "embed.word",
            "embed.coord.x1",
            "embed.seq",
            "embed.patch.weight",
            "backbone.layer0.attn.wq",
            "head.en1.out.weight",
            "head.en2.out.weight",
            "head.en3.start",
            "head.de1.layer1.cross.wo",
            "head.de3.layer2.ffn.w2",
        ] {
            assert!(m.params.params.contains_key(prefix), "{prefix}");
        }
        // De1/De2 stop at two layers, De3 has three
        assert!(!m.params.params.contains_key("head.de1.layer2.self.wq"));
        assert!(m.params.params.contains_key("head.de3.layer2.self.wq"));
    }
}
