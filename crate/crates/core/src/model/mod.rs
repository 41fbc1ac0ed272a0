//! Asymmetric transformer encoder/decoder and the embedding head.
//!
//! Parameters live in a single named [`ParamStore`]. A stage-1 model holds
//! the encoder and decoder; a stage-2 model holds the encoder and the
//! projection head. Forward passes are written against a [`Tape`] so the
//! same code serves training (tracked), the key encoder (frozen) and
//! 64-bit gradient checks.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Real, Tape, Tensor, Var};
use crate::tokenizer::{cube_dim, GridDims};

pub use checkpoint::{read_checkpoint, write_checkpoint, CKPT_MAGIC};

/// Pixel offset subtracted inside the cube projection so inputs are centred.
const PIXEL_CENTER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid: GridDims,
    pub channels: usize,
    pub d_enc: usize,
    pub heads: usize,
    pub depth_enc: usize,
    pub mlp_ratio: usize,
    pub d_dec: usize,
    pub dec_heads: usize,
    pub depth_dec: usize,
    pub d_emb: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridDims::new(8, 4, 4),
            channels: 3,
            d_enc: 96,
            heads: 4,
            depth_enc: 4,
            mlp_ratio: 4,
            d_dec: 48,
            dec_heads: 4,
            depth_dec: 1,
            d_emb: 64,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn cube_dim(&self) -> usize {
        cube_dim(self.channels)
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.tokens()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_enc == 0 || self.heads == 0 || self.d_enc % self.heads != 0 {
            return bad(format!("d_enc {} must be a positive multiple of heads {}", self.d_enc, self.heads));
        }
        if self.d_dec == 0 || self.dec_heads == 0 || self.d_dec % self.dec_heads != 0 {
            return bad(format!(
                "d_dec {} must be a positive multiple of dec_heads {}",
                self.d_dec, self.dec_heads
            ));
        }
        if self.mlp_ratio == 0 || self.d_emb == 0 || self.channels == 0 || self.n_tokens() == 0 {
            return bad("model dimensions must be >= 1".into());
        }
        if self.ln_eps <= 0.0 {
            return bad("ln_eps must be > 0".into());
        }
        Ok(())
    }
}

/// Store indices of one pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    ln1: (usize, usize),
    /// No bias: a key bias shifts every score in a row equally.
    qkv: usize,
    out: (usize, usize),
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone)]
struct DecoderIdx {
    embed: (usize, usize),
    mask_token: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    norm: (usize, usize),
    head: (usize, usize),
}

#[derive(Debug, Clone)]
struct Layout {
    cube: (usize, usize),
    pos: usize,
    enc: Vec<BlockIdx>,
    dec: Option<DecoderIdx>,
    head: Option<((usize, usize), (usize, usize))>,
}

/// Which parameter groups a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parts {
    /// Encoder plus reconstruction decoder (stage 1).
    Pretrain,
    /// Encoder plus projection head (stage 2 and retrieval).
    Embed,
}

/// Prefixes of the tensors carried from stage 1 into stage 2.
pub const ENCODER_PREFIXES: [&str; 3] = ["cube_proj.", "pos_embed", "enc."];

pub fn is_encoder_tensor(name: &str) -> bool {
    ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Named model parameters plus the indices the forward pass needs.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    layout: Layout,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn tensor(&mut self, name: String, shape: Vec<usize>, f: impl FnMut(&mut ChaCha8Rng) -> f64) -> Result<usize> {
        let mut f = f;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(f(&mut self.rng))).collect();
        self.store.insert(name, Tensor::new(shape, data)?)
    }

    /// Xavier-uniform weight and zero bias.
    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<(usize, usize)> {
        let a = (6.0 / (din + dout) as f64).sqrt();
        let w = self.tensor(format!("{name}.weight"), vec![din, dout], |r| r.random_range(-a..a))?;
        let b = self.tensor(format!("{name}.bias"), vec![dout], |_| 0.0)?;
        Ok((w, b))
    }

    fn linear_weight(&mut self, name: &str, din: usize, dout: usize) -> Result<usize> {
        let a = (6.0 / (din + dout) as f64).sqrt();
        self.tensor(format!("{name}.weight"), vec![din, dout], |r| r.random_range(-a..a))
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<(usize, usize)> {
        let g = self.tensor(format!("{name}.gamma"), vec![d], |_| 1.0)?;
        let b = self.tensor(format!("{name}.beta"), vec![d], |_| 0.0)?;
        Ok((g, b))
    }

    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> Result<usize> {
        let nd = Normal::new(0.0, std).expect("std is positive");
        self.tensor(name, shape, |r| nd.sample(r))
    }

    fn zeros(&mut self, name: &str, din: usize, dout: usize) -> Result<(usize, usize)> {
        let w = self.tensor(format!("{name}.weight"), vec![din, dout], |_| 0.0)?;
        let b = self.tensor(format!("{name}.bias"), vec![dout], |_| 0.0)?;
        Ok((w, b))
    }

    /// Residual-branch output projections start at zero, so a fresh block
    /// is the identity map.
    fn block(&mut self, name: &str, d: usize, ratio: usize) -> Result<BlockIdx> {
        Ok(BlockIdx {
            ln1: self.norm(&format!("{name}.ln1"), d)?,
            qkv: self.linear_weight(&format!("{name}.attn.qkv"), d, 3 * d)?,
            out: self.zeros(&format!("{name}.attn.out"), d, d)?,
            ln2: self.norm(&format!("{name}.ln2"), d)?,
            fc1: self.linear(&format!("{name}.mlp.fc1"), d, ratio * d)?,
            fc2: self.zeros(&format!("{name}.mlp.fc2"), ratio * d, d)?,
        })
    }

    fn encoder(&mut self, c: &ModelConfig) -> Result<()> {
        self.linear("cube_proj", c.cube_dim(), c.d_enc)?;
        self.normal("pos_embed".into(), vec![c.n_tokens(), c.d_enc], 0.02)?;
        for i in 0..c.depth_enc {
            self.block(&format!("enc.{i}"), c.d_enc, c.mlp_ratio)?;
        }
        Ok(())
    }

    fn decoder(&mut self, c: &ModelConfig) -> Result<()> {
        self.linear("dec.embed", c.d_enc, c.d_dec)?;
        self.normal("dec.mask_token".into(), vec![1, c.d_dec], 0.02)?;
        self.normal("dec.pos_embed".into(), vec![c.n_tokens(), c.d_dec], 0.02)?;
        for i in 0..c.depth_dec {
            self.block(&format!("dec.{i}"), c.d_dec, c.mlp_ratio)?;
        }
        self.norm("dec.norm", c.d_dec)?;
        self.linear("dec.head", c.d_dec, c.cube_dim())?;
        Ok(())
    }

    fn head(&mut self, c: &ModelConfig) -> Result<()> {
        self.linear("head.fc1", c.d_enc, c.d_enc)?;
        self.linear("head.fc2", c.d_enc, c.d_emb)?;
        Ok(())
    }
}

fn lookup<T: Real>(store: &ParamStore<T>, name: &str, shape: &[usize]) -> Result<usize> {
    let i = store
        .index_of(name)
        .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {name}")))?;
    if store.tensor(i).shape() != shape {
        return Err(Error::Dimension(format!(
            "tensor {name} has shape {:?}, model expects {shape:?}",
            store.tensor(i).shape()
        )));
    }
    Ok(i)
}

fn lookup_linear<T: Real>(s: &ParamStore<T>, name: &str, din: usize, dout: usize) -> Result<(usize, usize)> {
    Ok((
        lookup(s, &format!("{name}.weight"), &[din, dout])?,
        lookup(s, &format!("{name}.bias"), &[dout])?,
    ))
}

fn lookup_norm<T: Real>(s: &ParamStore<T>, name: &str, d: usize) -> Result<(usize, usize)> {
    Ok((
        lookup(s, &format!("{name}.gamma"), &[d])?,
        lookup(s, &format!("{name}.beta"), &[d])?,
    ))
}

fn lookup_block<T: Real>(s: &ParamStore<T>, name: &str, d: usize, ratio: usize) -> Result<BlockIdx> {
    Ok(BlockIdx {
        ln1: lookup_norm(s, &format!("{name}.ln1"), d)?,
        qkv: lookup(s, &format!("{name}.attn.qkv.weight"), &[d, 3 * d])?,
        out: lookup_linear(s, &format!("{name}.attn.out"), d, d)?,
        ln2: lookup_norm(s, &format!("{name}.ln2"), d)?,
        fc1: lookup_linear(s, &format!("{name}.mlp.fc1"), d, ratio * d)?,
        fc2: lookup_linear(s, &format!("{name}.mlp.fc2"), ratio * d, d)?,
    })
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters for `parts`, deterministic in `seed`.
    pub fn init(config: &ModelConfig, parts: Parts, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        init.encoder(config)?;
        match parts {
            Parts::Pretrain => init.decoder(config)?,
            Parts::Embed => init.head(config)?,
        }
        Self::from_store(config, store)
    }

    /// Wraps an existing store, checking every tensor the config requires.
    /// Decoder and head are optional; whichever is present is used.
    pub fn from_store(config: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let (d, r, n) = (config.d_enc, config.mlp_ratio, config.n_tokens());
        let cube = lookup_linear(&store, "cube_proj", config.cube_dim(), d)?;
        let pos = lookup(&store, "pos_embed", &[n, d])?;
        let enc = (0..config.depth_enc)
            .map(|i| lookup_block(&store, &format!("enc.{i}"), d, r))
            .collect::<Result<Vec<_>>>()?;
        let dec = if store.index_of("dec.mask_token").is_some() {
            let dd = config.d_dec;
            Some(DecoderIdx {
                embed: lookup_linear(&store, "dec.embed", d, dd)?,
                mask_token: lookup(&store, "dec.mask_token", &[1, dd])?,
                pos: lookup(&store, "dec.pos_embed", &[n, dd])?,
                blocks: (0..config.depth_dec)
                    .map(|i| lookup_block(&store, &format!("dec.{i}"), dd, r))
                    .collect::<Result<Vec<_>>>()?,
                norm: lookup_norm(&store, "dec.norm", dd)?,
                head: lookup_linear(&store, "dec.head", dd, config.cube_dim())?,
            })
        } else {
            None
        };
        let head = if store.index_of("head.fc1.weight").is_some() {
            Some((
                lookup_linear(&store, "head.fc1", d, d)?,
                lookup_linear(&store, "head.fc2", d, config.d_emb)?,
            ))
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            store,
            layout: Layout {
                cube,
                pos,
                enc,
                dec,
                head,
            },
        })
    }

    pub fn has_decoder(&self) -> bool {
        self.layout.dec.is_some()
    }

    pub fn has_head(&self) -> bool {
        self.layout.head.is_some()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Encoder tensors of `pretrained` combined with a fresh projection head.
    pub fn transfer_encoder(pretrained: &ModelParams<T>, head_seed: u64) -> Result<Self> {
        let fresh = Self::init(&pretrained.config, Parts::Embed, head_seed)?;
        let mut store = ParamStore::new();
        for (name, t) in fresh.store.iter() {
            let t = if is_encoder_tensor(name) {
                pretrained
                    .store
                    .get(name)
                    .ok_or_else(|| Error::Contract(format!("pretrained model lacks {name}")))?
                    .clone()
            } else {
                t.clone()
            };
            store.insert(name, t)?;
        }
        Self::from_store(&pretrained.config, store)
    }

    /// Binds the store on `tape`; `frozen` keeps it out of the gradient.
    pub fn bind(&self, tape: &mut Tape<T>, frozen: bool) -> Bound {
        let vars = if frozen {
            tape.bind_frozen(&self.store)
        } else {
            tape.bind(&self.store)
        };
        Bound { vars }
    }

    fn v(&self, b: &Bound, i: usize) -> Var {
        b.vars[i]
    }

    fn block_forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        blk: &BlockIdx,
        x: Var,
        heads: usize,
    ) -> Result<Var> {
        let eps = T::lit(self.config.ln_eps);
        let d = tape.shape(x)[1];
        let dh = d / heads;
        let h = tape.layer_norm(x, self.v(b, blk.ln1.0), self.v(b, blk.ln1.1), eps)?;
        let qkv = tape.matmul(h, self.v(b, blk.qkv))?;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = tape.slice_cols(qkv, hd * dh, dh)?;
            let k = tape.slice_cols(qkv, d + hd * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * d + hd * dh, dh)?;
            let s = tape.matmul_t(q, k, false, true)?;
            let s = tape.scale(s, scale)?;
            let p = tape.softmax(s, 1)?;
            outs.push(tape.matmul(p, v)?);
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let a = tape.linear(o, self.v(b, blk.out.0), self.v(b, blk.out.1))?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, self.v(b, blk.ln2.0), self.v(b, blk.ln2.1), eps)?;
        let h = tape.linear(h, self.v(b, blk.fc1.0), self.v(b, blk.fc1.1))?;
        let h = tape.gelu(h)?;
        let h = tape.linear(h, self.v(b, blk.fc2.0), self.v(b, blk.fc2.1))?;
        tape.add(x, h)
    }

    /// Encoder over tokens at `positions`. `tokens` is `n × D_cube` raw
    /// pixels; centring happens here.
    pub fn encode_visible(&self, tape: &mut Tape<T>, b: &Bound, tokens: &[T], positions: &[usize]) -> Result<Var> {
        let dc = self.config.cube_dim();
        let n = positions.len();
        if tokens.len() != n * dc {
            return Err(Error::Dimension(format!(
                "{} token values for {n} positions of dim {dc}",
                tokens.len()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.n_tokens()) {
            return Err(Error::Dimension(format!("position {p} outside the positional table")));
        }
        let c = T::lit(PIXEL_CENTER);
        let x = tape.constant(vec![n, dc], tokens.iter().map(|&v| v - c).collect())?;
        let x = tape.linear(x, self.v(b, self.layout.cube.0), self.v(b, self.layout.cube.1))?;
        let pos = tape.gather_rows(self.v(b, self.layout.pos), positions)?;
        let mut x = tape.add(x, pos)?;
        for (i, blk) in self.layout.enc.iter().enumerate() {
            x = self
                .block_forward(tape, b, blk, x, self.config.heads)
                .map_err(|e| in_block(e, "encoder", i))?;
        }
        Ok(x)
    }

    /// Reconstructs the cubes at `masked` from visible latents. Output rows
    /// follow the order of `masked`.
    pub fn decode(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        latent: Var,
        visible: &[usize],
        masked: &[usize],
    ) -> Result<Var> {
        let dec = self
            .layout
            .dec
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no decoder".into()))?;
        let n = self.config.n_tokens();
        let mut seen = vec![false; n];
        for &p in visible {
            if p >= n {
                return Err(Error::Dimension(format!("position {p} outside the grid")));
            }
            seen[p] = true;
        }
        for &p in masked {
            if p >= n {
                return Err(Error::Dimension(format!("position {p} outside the grid")));
            }
            if seen[p] {
                return Err(Error::Contract(format!("position {p} is both visible and masked")));
            }
        }
        if tape.shape(latent) != [visible.len(), self.config.d_enc] {
            return Err(Error::Dimension(format!(
                "latent shape {:?} for {} visible tokens",
                tape.shape(latent),
                visible.len()
            )));
        }
        let dc = self.config.cube_dim();
        if masked.is_empty() {
            return tape.constant(vec![0, dc], Vec::new());
        }
        let y = tape.linear(latent, self.v(b, dec.embed.0), self.v(b, dec.embed.1))?;
        let m = tape.gather_rows(self.v(b, dec.mask_token), &vec![0; masked.len()])?;
        let seq = if visible.is_empty() { m } else { tape.concat_rows(&[y, m])? };
        let order: Vec<usize> = visible.iter().chain(masked).copied().collect();
        let pos = tape.gather_rows(self.v(b, dec.pos), &order)?;
        let mut x = tape.add(seq, pos)?;
        for (i, blk) in dec.blocks.iter().enumerate() {
            x = self
                .block_forward(tape, b, blk, x, self.config.dec_heads)
                .map_err(|e| in_block(e, "decoder", i))?;
        }
        let x = tape.layer_norm(x, self.v(b, dec.norm.0), self.v(b, dec.norm.1), T::lit(self.config.ln_eps))?;
        let rows: Vec<usize> = (visible.len()..order.len()).collect();
        let x = tape.gather_rows(x, &rows)?;
        tape.linear(x, self.v(b, dec.head.0), self.v(b, dec.head.1))
    }

    /// Mean-pooled encoder features of one full token grid, `1 × d_enc`.
    pub fn pooled(&self, tape: &mut Tape<T>, b: &Bound, tokens: &[T]) -> Result<Var> {
        let all: Vec<usize> = (0..self.config.n_tokens()).collect();
        let x = self.encode_visible(tape, b, tokens, &all)?;
        tape.mean_rows(x)
    }

    /// Projection head and L2 normalisation over stacked pooled rows.
    pub fn project(&self, tape: &mut Tape<T>, b: &Bound, pooled: Var) -> Result<Var> {
        let ((w1, b1), (w2, b2)) = self
            .layout
            .head
            .ok_or_else(|| Error::Contract("model has no projection head".into()))?;
        let h = tape.linear(pooled, self.v(b, w1), self.v(b, b1))?;
        let h = tape.gelu(h)?;
        let z = tape.linear(h, self.v(b, w2), self.v(b, b2))?;
        tape.l2_normalize_rows(z, T::lit(1e-12))
    }

    /// Unit-norm embeddings of a batch of full token grids, `B × d_emb`.
    pub fn embed_batch(&self, tape: &mut Tape<T>, b: &Bound, clips: &[&[T]]) -> Result<Var> {
        if clips.is_empty() {
            return Err(Error::Dimension("embed of an empty batch".into()));
        }
        let pooled = clips
            .iter()
            .map(|c| self.pooled(tape, b, c))
            .collect::<Result<Vec<_>>>()?;
        let stacked = if pooled.len() == 1 { pooled[0] } else { tape.concat_rows(&pooled)? };
        self.project(tape, b, stacked)
    }
}

fn in_block(e: Error, part: &str, i: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{part} block {i}: {m}")),
        other => other,
    }
}

/// Vars of a bound store, by store index.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl ModelParams<f32> {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_checkpoint(path, &self.store)
    }

    pub fn load(config: &ModelConfig, path: &std::path::Path) -> Result<Self> {
        Self::from_store(config, read_checkpoint(path)?)
    }

    /// Embeddings for clips given as cube-token buffers, batched
    /// `batch` at a time; rows are `d_emb` long.
    pub fn embed_tokens(&self, clips: &[Vec<f32>], batch: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, true);
            let refs: Vec<&[f32]> = chunk.iter().map(|c| c.as_slice()).collect();
            let z = self.embed_batch(&mut tape, &b, &refs)?;
            out.extend(tape.value(z).chunks(self.config.d_emb).map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
