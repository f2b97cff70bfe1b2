//! Flat parameter storage.
//!
//! All weights live in one contiguous `Vec<f64>`; a [`Layout`] records the
//! named, row-major tensors inside it and typed [`Slot`] handles give the
//! forward and backward code cheap views. Gradients and optimizer moments use
//! the same layout, so updates are plain slice arithmetic.

use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::util::rng_for;

/// Location of one tensor inside the flat buffer. Vectors have `rows == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormSlots {
    pub gain: Slot,
    pub bias: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnSlots {
    pub wq: Slot,
    pub wk: Slot,
    pub wv: Slot,
    pub wo: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnSlots {
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerSlots {
    pub ln1: NormSlots,
    pub attn: AttnSlots,
    pub ln2: NormSlots,
    pub ffn: FfnSlots,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerSlots {
    pub ln1: NormSlots,
    pub self_attn: AttnSlots,
    pub ln2: NormSlots,
    pub cross_attn: AttnSlots,
    pub ln3: NormSlots,
    pub ffn: FfnSlots,
}

/// Named tensors of the model in buffer order.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: Slot,
    pub enc_pos: Slot,
    pub enc_layers: Vec<EncoderLayerSlots>,
    pub enc_norm: NormSlots,
    pub dec_start: Slot,
    pub dec_pos: Slot,
    pub dec_layers: Vec<DecoderLayerSlots>,
    pub dec_norm: NormSlots,
    /// One V x D table per identifier position.
    pub docid_emb: Vec<Slot>,
    entries: Vec<(String, Slot)>,
    total: usize,
}

/// Initialization class of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

struct Builder {
    entries: Vec<(String, Slot)>,
    inits: Vec<Init>,
    offset: usize,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Slot {
        let slot = Slot {
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += rows * cols;
        self.entries.push((name, slot));
        self.inits.push(init);
        slot
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormSlots {
        NormSlots {
            gain: self.add(format!("{prefix}.gain"), 1, d, Init::Ones),
            bias: self.add(format!("{prefix}.bias"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnSlots {
        AttnSlots {
            wq: self.add(format!("{prefix}.wq"), d, d, Init::Normal),
            wk: self.add(format!("{prefix}.wk"), d, d, Init::Normal),
            wv: self.add(format!("{prefix}.wv"), d, d, Init::Normal),
            wo: self.add(format!("{prefix}.wo"), d, d, Init::Normal),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnSlots {
        FfnSlots {
            w1: self.add(format!("{prefix}.w1"), d, f, Init::Normal),
            b1: self.add(format!("{prefix}.b1"), 1, f, Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), f, d, Init::Normal),
            b2: self.add(format!("{prefix}.b2"), 1, d, Init::Zeros),
        }
    }
}

impl Layout {
    fn build(cfg: &ModelConfig) -> (Layout, Vec<Init>) {
        let d = cfg.d_model;
        let mut b = Builder {
            entries: Vec::new(),
            inits: Vec::new(),
            offset: 0,
        };
        let tok_emb = b.add("tok_emb".into(), cfg.token_vocab, d, Init::Normal);
        let enc_pos = b.add("enc_pos".into(), cfg.max_seq_len, d, Init::Normal);
        let enc_layers = (0..cfg.n_layers)
            .map(|l| EncoderLayerSlots {
                ln1: b.norm(&format!("enc.{l}.ln1"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln2: b.norm(&format!("enc.{l}.ln2"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, cfg.ffn_dim),
            })
            .collect();
        let enc_norm = b.norm("enc_norm", d);
        let dec_start = b.add("dec_start".into(), 1, d, Init::Normal);
        let dec_pos = b.add("dec_pos".into(), cfg.docid_len, d, Init::Normal);
        let dec_layers = (0..cfg.n_layers)
            .map(|l| DecoderLayerSlots {
                ln1: b.norm(&format!("dec.{l}.ln1"), d),
                self_attn: b.attn(&format!("dec.{l}.self"), d),
                ln2: b.norm(&format!("dec.{l}.ln2"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross"), d),
                ln3: b.norm(&format!("dec.{l}.ln3"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, cfg.ffn_dim),
            })
            .collect();
        let dec_norm = b.norm("dec_norm", d);
        let docid_emb = (0..cfg.docid_len)
            .map(|i| b.add(format!("docid_emb.{i}"), cfg.docid_vocab, d, Init::Normal))
            .collect();
        let layout = Layout {
            tok_emb,
            enc_pos,
            enc_layers,
            enc_norm,
            dec_start,
            dec_pos,
            dec_layers,
            dec_norm,
            docid_emb,
            entries: b.entries,
            total: b.offset,
        };
        (layout, b.inits)
    }

    pub fn entries(&self) -> &[(String, Slot)] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<Slot> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
    }
}

/// Standard deviation of the Gaussian initialization.
pub const INIT_STD: f64 = 0.02;

/// Model parameters: configuration, layout and the flat weight buffer.
#[derive(Debug, Clone)]
pub struct Params {
    config: ModelConfig,
    layout: Arc<Layout>,
    pub(crate) data: Vec<f64>,
}

impl PartialEq for Params {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Params {
    /// Gaussian(0, 0.02) weights, unit norm gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, inits) = Layout::build(config);
        let mut data = vec![0.0; layout.total];
        let mut rng = rng_for(seed, "params/init");
        for ((_, slot), init) in layout.entries.iter().zip(inits) {
            let buf = &mut data[slot.range()];
            match init {
                Init::Normal => buf
                    .iter_mut()
                    .for_each(|x| *x = INIT_STD * rng.sample::<f64, _>(StandardNormal)),
                Init::Ones => buf.fill(1.0),
                Init::Zeros => buf.fill(0.0),
            }
        }
        Ok(Params {
            config: config.clone(),
            layout: Arc::new(layout),
            data,
        })
    }

    /// Wraps an existing flat buffer; its length must match the layout.
    pub fn from_flat(config: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layout, _) = Layout::build(config);
        if data.len() != layout.total {
            return Err(Error::Dimension(format!(
                "parameter buffer has {} values, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Params {
            config: config.clone(),
            layout: Arc::new(layout),
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mat(&self, s: Slot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.rows, s.cols), &self.data[s.range()]).unwrap()
    }

    pub fn vec(&self, s: Slot) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[s.range()])
    }

    pub fn row(&self, s: Slot, r: usize) -> &[f64] {
        let start = s.offset + r * s.cols;
        &self.data[start..start + s.cols]
    }

    pub fn mat_mut(&mut self, s: Slot) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut self.data[s.range()]).unwrap()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|s| &self.data[s.range()])
    }

    /// Row `code` of identifier table `position` (0-based).
    pub fn docid_row(&self, position: usize, code: usize) -> &[f64] {
        self.row(self.layout.docid_emb[position], code)
    }

    /// Overwrites the identifier tables with the given V x D matrices.
    pub fn set_docid_tables(&mut self, tables: &[ndarray::Array2<f64>]) -> Result<()> {
        let slots = self.layout.docid_emb.clone();
        if tables.len() != slots.len() {
            return Err(Error::Dimension(format!(
                "expected {} identifier tables, got {}",
                slots.len(),
                tables.len()
            )));
        }
        for (slot, table) in slots.iter().zip(tables) {
            if table.dim() != (slot.rows, slot.cols) {
                return Err(Error::Dimension(format!(
                    "identifier table is {:?}, expected {}x{}",
                    table.dim(),
                    slot.rows,
                    slot.cols
                )));
            }
            self.mat_mut(*slot).assign(table);
        }
        Ok(())
    }

    /// Parameters for the same model with identifiers of a different shape.
    /// Tensors present in both layouts are copied (for `dec_pos`, the shared
    /// leading rows); everything else is freshly initialized from `seed`.
    pub fn reshaped(&self, docid_len: usize, docid_vocab: usize, seed: u64) -> Result<Params> {
        let cfg = ModelConfig {
            docid_len,
            docid_vocab,
            ..self.config.clone()
        };
        let mut out = Params::init(&cfg, seed)?;
        let entries = out.layout.entries.clone();
        for (name, slot) in entries {
            let Some(old) = self.layout.find(&name) else {
                continue;
            };
            if old.cols != slot.cols || (old.rows != slot.rows && name != "dec_pos") {
                continue;
            }
            let n = old.rows.min(slot.rows) * slot.cols;
            out.data[slot.offset..slot.offset + n]
                .copy_from_slice(&self.data[old.offset..old.offset + n]);
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            layout: self.layout.clone(),
            data: vec![0.0; self.data.len()],
        }
    }
}

/// Gradient buffer with the same layout as [`Params`].
#[derive(Debug, Clone)]
pub struct Grads {
    layout: Arc<Layout>,
    pub(crate) data: Vec<f64>,
}

impl Grads {
    pub fn new(layout: Arc<Layout>) -> Self {
        let n = layout.total;
        Grads {
            layout,
            data: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn mat_mut(&mut self, s: Slot) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut self.data[s.range()]).unwrap()
    }

    pub fn vec_mut(&mut self, s: Slot) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[s.range()])
    }

    pub fn row_mut(&mut self, s: Slot, r: usize) -> &mut [f64] {
        let start = s.offset + r * s.cols;
        &mut self.data[start..start + s.cols]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|a| *a *= s);
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            docid_len: 3,
            docid_vocab: 5,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            token_vocab: 11,
            max_seq_len: 9,
        }
    }

    #[test]
    fn layout_is_contiguous_and_named_uniquely() {
        let p = Params::init(&tiny(), 0).unwrap();
        let mut expected = 0;
        let mut names = std::collections::HashSet::new();
        for (name, slot) in p.layout().entries() {
            assert_eq!(slot.offset, expected);
            expected += slot.len();
            assert!(names.insert(name.clone()));
        }
        assert_eq!(expected, p.len());
        assert_eq!(p.layout().docid_emb.len(), 3);
    }

    #[test]
    fn docid_tables_are_distinct() {
        let p = Params::init(&tiny(), 1).unwrap();
        let a = p.tensor("docid_emb.0").unwrap();
        let b = p.tensor("docid_emb.1").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(
            Params::init(&tiny(), 3).unwrap(),
            Params::init(&tiny(), 3).unwrap()
        );
        assert_ne!(
            Params::init(&tiny(), 3).unwrap(),
            Params::init(&tiny(), 4).unwrap()
        );
    }

    #[test]
    fn set_docid_tables_checks_shapes() {
        let mut p = Params::init(&tiny(), 0).unwrap();
        let good = vec![ndarray::Array2::from_elem((5, 8), 0.5); 3];
        p.set_docid_tables(&good).unwrap();
        assert_eq!(p.docid_row(2, 4), &[0.5; 8]);
        let bad = vec![ndarray::Array2::zeros((4, 8)); 3];
        assert!(p.set_docid_tables(&bad).is_err());
    }
}
