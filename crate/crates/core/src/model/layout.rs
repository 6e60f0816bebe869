//! Named slices of the flat parameter vector.

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Rows x cols for matrices, (len, 1) for vectors.
    pub shape: (usize, usize),
}

/// Deterministic layout of every parameter tensor in the flat vector.
/// Matrices are stored row-major as (out_dim, in_dim).
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub slices: Vec<Slice>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let v = cfg.vocab_size as usize;
        let f = cfg.ffn_dim();
        let mut slices = Vec::new();
        let mut offset = 0usize;
        let mut push = |slices: &mut Vec<Slice>, name: String, shape: (usize, usize)| {
            let len = shape.0 * shape.1;
            slices.push(Slice {
                name,
                offset,
                len,
                shape,
            });
            offset += len;
        };
        push(&mut slices, "tok_emb".into(), (v, d));
        push(&mut slices, "pos_emb".into(), (cfg.max_len, d));
        push(&mut slices, "spk_w".into(), (d, cfg.speaker_dim));
        push(&mut slices, "spk_b".into(), (d, 1));
        for l in 0..cfg.n_layers {
            push(&mut slices, format!("l{l}.ln1_g"), (d, 1));
            push(&mut slices, format!("l{l}.ln1_b"), (d, 1));
            for name in ["wq", "wk", "wv", "wo"] {
                push(&mut slices, format!("l{l}.{name}"), (d, d));
                push(&mut slices, format!("l{l}.b{}", &name[1..]), (d, 1));
            }
            push(&mut slices, format!("l{l}.ln2_g"), (d, 1));
            push(&mut slices, format!("l{l}.ln2_b"), (d, 1));
            push(&mut slices, format!("l{l}.w1"), (f, d));
            push(&mut slices, format!("l{l}.b1"), (f, 1));
            push(&mut slices, format!("l{l}.w2"), (d, f));
            push(&mut slices, format!("l{l}.b2"), (d, 1));
        }
        push(&mut slices, "lnf_g".into(), (d, 1));
        push(&mut slices, "lnf_b".into(), (d, 1));
        push(&mut slices, "out_w".into(), (v, d));
        push(&mut slices, "out_b".into(), (v, 1));
        ParamLayout {
            slices,
            total: offset,
        }
    }

    pub fn find(&self, name: &str) -> &Slice {
        self.slices
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter slice named '{name}'"))
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let s = self.find(name);
        s.offset..s.offset + s.len
    }

    /// Closed-form parameter count; must agree with `total`.
    pub fn expected_count(cfg: &ModelConfig) -> usize {
        let d = cfg.d_model;
        let v = cfg.vocab_size as usize;
        let f = cfg.ffn_dim();
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (f * d + f) + (d * f + d);
        v * d + cfg.max_len * d + (d * cfg.speaker_dim + d)
            + cfg.n_layers * per_layer
            + 2 * d
            + (v * d + v)
    }
}
