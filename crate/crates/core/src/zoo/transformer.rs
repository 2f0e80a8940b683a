//! Decoder-only transformer: learned token and position embeddings, pre-norm
//! blocks with causal multi-head attention and a GELU feed-forward layer, a
//! final layer norm and an untied output projection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{gelu, gelu_grad};
use super::{visit_linear, BatchInput, Capture, LayerNorm, Network, Outputs, Param, ParamVisitor};
use crate::linear::{DenseLinear, LinearOp};
use crate::tensor::{matmul_dense, matmul_nn, matmul_tn, DenseMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub context: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if [
            self.vocab,
            self.d_model,
            self.n_blocks,
            self.n_heads,
            self.context,
        ]
        .contains(&0)
        {
            return Err(Error::invalid("transformer dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

const LINEAR_NAMES: [&str; 6] = ["q_proj", "k_proj", "v_proj", "out_proj", "fc1", "fc2"];

#[derive(Debug, Clone)]
struct BlockCache {
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    probs: Vec<DenseMatrix>,
    h1: DenseMatrix,
    batch: usize,
    len: usize,
}

#[derive(Debug, Clone)]
pub struct Block<L> {
    pub ln1: LayerNorm,
    pub q_proj: L,
    pub k_proj: L,
    pub v_proj: L,
    pub out_proj: L,
    pub ln2: LayerNorm,
    pub fc1: L,
    pub fc2: L,
    n_heads: usize,
    cache: Option<BlockCache>,
}

impl<L: PartialEq> PartialEq for Block<L> {
    fn eq(&self, o: &Self) -> bool {
        self.ln1 == o.ln1
            && self.ln2 == o.ln2
            && self.q_proj == o.q_proj
            && self.k_proj == o.k_proj
            && self.v_proj == o.v_proj
            && self.out_proj == o.out_proj
            && self.fc1 == o.fc1
            && self.fc2 == o.fc2
    }
}

fn sub_block(m: &DenseMatrix, r0: usize, rows: usize, c0: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |r, c| m.get(r0 + r, c0 + c))
}

fn put_block(dst: &mut DenseMatrix, r0: usize, c0: usize, src: &DenseMatrix) {
    for r in 0..src.rows() {
        dst.row_mut(r0 + r)[c0..c0 + src.cols()].copy_from_slice(src.row(r));
    }
}

fn attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    batch: usize,
    len: usize,
    heads: usize,
) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = DenseMatrix::zeros(batch * len, d);
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        for h in 0..heads {
            let (r0, c0) = (b * len, h * dh);
            let qh = sub_block(q, r0, len, c0, dh);
            let kh = sub_block(k, r0, len, c0, dh);
            let vh = sub_block(v, r0, len, c0, dh);
            let mut p = matmul_dense(&qh, &kh)?;
            for i in 0..len {
                let row = &mut p.row_mut(i)[..];
                let max = row[..=i]
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
                let mut sum = 0.0;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if j <= i {
                        (*s * scale - max).exp()
                    } else {
                        0.0
                    };
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            put_block(&mut out, r0, c0, &matmul_nn(&p, &vh)?);
            probs.push(p);
        }
    }
    Ok((out, probs))
}

fn attention_backward(
    d_out: &DenseMatrix,
    c: &BlockCache,
    heads: usize,
) -> Result<[DenseMatrix; 3]> {
    let d = c.q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = c.batch * c.len;
    let mut dq = DenseMatrix::zeros(n, d);
    let mut dk = DenseMatrix::zeros(n, d);
    let mut dv = DenseMatrix::zeros(n, d);
    for b in 0..c.batch {
        for h in 0..heads {
            let (r0, c0) = (b * c.len, h * dh);
            let p = &c.probs[b * heads + h];
            let d_o = sub_block(d_out, r0, c.len, c0, dh);
            let qh = sub_block(&c.q, r0, c.len, c0, dh);
            let kh = sub_block(&c.k, r0, c.len, c0, dh);
            let vh = sub_block(&c.v, r0, c.len, c0, dh);
            let dp = matmul_dense(&d_o, &vh)?;
            put_block(&mut dv, r0, c0, &matmul_tn(p, &d_o)?);
            let mut ds = DenseMatrix::zeros(c.len, c.len);
            for i in 0..c.len {
                let (pr, dpr) = (p.row(i), dp.row(i));
                let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
                    *o = pr[j] * (dpr[j] - inner) * scale;
                }
            }
            put_block(&mut dq, r0, c0, &matmul_nn(&ds, &kh)?);
            put_block(&mut dk, r0, c0, &matmul_tn(&ds, &qh)?);
        }
    }
    Ok([dq, dk, dv])
}

impl<L: LinearOp> Block<L> {
    fn linears(&self) -> [&L; 6] {
        [
            &self.q_proj,
            &self.k_proj,
            &self.v_proj,
            &self.out_proj,
            &self.fc1,
            &self.fc2,
        ]
    }

    fn linears_mut(&mut self) -> [&mut L; 6] {
        [
            &mut self.q_proj,
            &mut self.k_proj,
            &mut self.v_proj,
            &mut self.out_proj,
            &mut self.fc1,
            &mut self.fc2,
        ]
    }

    fn forward(&mut self, x: &DenseMatrix, batch: usize, len: usize) -> Result<DenseMatrix> {
        let a = self.ln1.forward(x)?;
        let q = self.q_proj.forward(&a)?;
        let k = self.k_proj.forward(&a)?;
        let v = self.v_proj.forward(&a)?;
        let (att, probs) = attention(&q, &k, &v, batch, len, self.n_heads)?;
        let mut x1 = x.add(&self.out_proj.forward(&att)?)?;
        let f = self.ln2.forward(&x1)?;
        let h1 = self.fc1.forward(&f)?;
        x1.add_assign(&self.fc2.forward(&h1.map(gelu))?)?;
        self.cache = Some(BlockCache {
            q,
            k,
            v,
            probs,
            h1,
            batch,
            len,
        });
        Ok(x1)
    }

    fn infer(
        &self,
        x: &DenseMatrix,
        batch: usize,
        len: usize,
        prefix: &str,
        cap: &mut Capture<'_>,
    ) -> Result<DenseMatrix> {
        let run = |lin: &L,
                   name: &str,
                   input: &DenseMatrix,
                   cap: &mut Capture<'_>|
         -> Result<DenseMatrix> {
            let y = lin.infer(input)?;
            cap(&format!("{prefix}.{name}"), input, &y);
            Ok(y)
        };
        let a = self.ln1.infer(x)?;
        let q = run(&self.q_proj, "q_proj", &a, cap)?;
        let k = run(&self.k_proj, "k_proj", &a, cap)?;
        let v = run(&self.v_proj, "v_proj", &a, cap)?;
        let (att, _) = attention(&q, &k, &v, batch, len, self.n_heads)?;
        let mut x1 = x.add(&run(&self.out_proj, "out_proj", &att, cap)?)?;
        let f = self.ln2.infer(&x1)?;
        let h1 = run(&self.fc1, "fc1", &f, cap)?;
        x1.add_assign(&run(&self.fc2, "fc2", &h1.map(gelu), cap)?)?;
        Ok(x1)
    }

    fn backward(&mut self, dx2: &DenseMatrix) -> Result<DenseMatrix> {
        let c = self.cache.take().ok_or(Error::MissingCache)?;
        let dg = self.fc2.backward_input(dx2)?;
        let dh1 = dg.zip_with(&c.h1, |g, h| g * gelu_grad(h));
        let df = self.fc1.backward_input(&dh1)?;
        let mut dx1 = dx2.clone();
        dx1.add_assign(&self.ln2.backward(&df)?)?;
        let datt = self.out_proj.backward_input(&dx1)?;
        let [dq, dk, dv] = attention_backward(&datt, &c, self.n_heads)?;
        let mut da = self.q_proj.backward_input(&dq)?;
        da.add_assign(&self.k_proj.backward_input(&dk)?)?;
        da.add_assign(&self.v_proj.backward_input(&dv)?)?;
        dx1.add_assign(&self.ln1.backward(&da)?)?;
        Ok(dx1)
    }
}

#[derive(Debug, Clone)]
struct ModelCache {
    ids: Vec<usize>,
    len: usize,
    xf: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct Transformer<L> {
    pub config: TransformerConfig,
    pub tok_emb: Param,
    pub pos_emb: Param,
    pub blocks: Vec<Block<L>>,
    pub ln_f: LayerNorm,
    /// Output projection `vocab × d_model`, kept in full precision.
    pub lm_head: Param,
    cache: Option<ModelCache>,
}

impl<L: PartialEq> PartialEq for Transformer<L> {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.tok_emb.value == o.tok_emb.value
            && self.pos_emb.value == o.pos_emb.value
            && self.blocks == o.blocks
            && self.ln_f == o.ln_f
            && self.lm_head.value == o.lm_head.value
    }
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

impl Transformer<DenseLinear> {
    pub(crate) fn init(config: TransformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let tok_emb = Param::new(normal(config.vocab, d, 0.1, rng));
        let pos_emb = Param::new(normal(config.context, d, 0.1, rng));
        let residual = 1.0 / (2.0 * config.n_blocks as f64).sqrt();
        let linear = |out: usize, inp: usize, gain: f64, rng: &mut ChaCha8Rng| {
            DenseLinear::new(
                normal(out, inp, gain / (inp as f64).sqrt(), rng),
                Some(vec![0.0; out]),
            )
            .expect("consistent shapes")
        };
        let blocks = (0..config.n_blocks)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                q_proj: linear(d, d, 1.0, rng),
                k_proj: linear(d, d, 1.0, rng),
                v_proj: linear(d, d, 1.0, rng),
                out_proj: linear(d, d, residual, rng),
                ln2: LayerNorm::new(d),
                fc1: linear(4 * d, d, 1.0, rng),
                fc2: linear(d, 4 * d, residual, rng),
                n_heads: config.n_heads,
                cache: None,
            })
            .collect();
        let lm_head = Param::new(normal(config.vocab, d, 1.0 / (d as f64).sqrt(), rng));
        Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(d),
            lm_head,
            cache: None,
        }
    }
}

impl<L: LinearOp> Transformer<L> {
    pub(crate) fn map_linears<M: LinearOp>(
        &self,
        mut f: impl FnMut(&str, &L) -> Result<M>,
    ) -> Result<Transformer<M>> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let mut g = |name: &str, l: &L| f(&format!("block{i}.{name}"), l);
            blocks.push(Block {
                ln1: b.ln1.detached(),
                q_proj: g("q_proj", &b.q_proj)?,
                k_proj: g("k_proj", &b.k_proj)?,
                v_proj: g("v_proj", &b.v_proj)?,
                out_proj: g("out_proj", &b.out_proj)?,
                ln2: b.ln2.detached(),
                fc1: g("fc1", &b.fc1)?,
                fc2: g("fc2", &b.fc2)?,
                n_heads: b.n_heads,
                cache: None,
            });
        }
        Ok(Transformer {
            config: self.config,
            tok_emb: Param::new(self.tok_emb.value.clone()),
            pos_emb: Param::new(self.pos_emb.value.clone()),
            blocks,
            ln_f: self.ln_f.detached(),
            lm_head: Param::new(self.lm_head.value.clone()),
            cache: None,
        })
    }

    fn tokens<'a>(&self, input: &'a BatchInput) -> Result<(&'a [usize], usize, usize)> {
        let BatchInput::Tokens { ids, batch, len } = input else {
            return Err(Error::invalid("a transformer takes token inputs"));
        };
        if *len == 0 || *len > self.config.context || ids.len() != batch * len {
            return Err(Error::invalid(format!(
                "token batch of {} ids as {batch}×{len} does not fit context {}",
                ids.len(),
                self.config.context
            )));
        }
        if let Some(&t) = ids.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary")));
        }
        Ok((ids, *batch, *len))
    }

    fn embed(&self, ids: &[usize], len: usize) -> DenseMatrix {
        let d = self.config.d_model;
        DenseMatrix::from_fn(ids.len(), d, |r, c| {
            self.tok_emb.value.get(ids[r], c) + self.pos_emb.value.get(r % len, c)
        })
    }
}

impl<L: LinearOp> Network for Transformer<L> {
    type Linear = L;

    fn forward(&mut self, input: &BatchInput) -> Result<Outputs> {
        let (ids, batch, len) = self.tokens(input)?;
        let mut x = self.embed(ids, len);
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            x = b.forward(&x, batch, len)?;
            hidden.push(x.clone());
        }
        let xf = self.ln_f.forward(&x)?;
        let out = matmul_dense(&xf, &self.lm_head.value)?;
        self.cache = Some(ModelCache {
            ids: ids.to_vec(),
            len,
            xf,
        });
        Ok(Outputs { out, hidden })
    }

    fn infer_capture(&self, input: &BatchInput, capture: &mut Capture<'_>) -> Result<Outputs> {
        let (ids, batch, len) = self.tokens(input)?;
        let mut x = self.embed(ids, len);
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.infer(&x, batch, len, &format!("block{i}"), capture)?;
            hidden.push(x.clone());
        }
        let xf = self.ln_f.infer(&x)?;
        let out = matmul_dense(&xf, &self.lm_head.value)?;
        Ok(Outputs { out, hidden })
    }

    fn backward(&mut self, d_out: &DenseMatrix, d_hidden: &[Option<DenseMatrix>]) -> Result<()> {
        let c = self.cache.take().ok_or(Error::MissingCache)?;
        self.lm_head.grad = Some(matmul_tn(d_out, &c.xf)?);
        let mut dx = self
            .ln_f
            .backward(&matmul_nn(d_out, &self.lm_head.value)?)?;
        for i in (0..self.blocks.len()).rev() {
            if let Some(Some(dh)) = d_hidden.get(i) {
                dx.add_assign(dh)?;
            }
            dx = self.blocks[i].backward(&dx)?;
        }
        let d = self.config.d_model;
        let mut dtok = DenseMatrix::zeros(self.config.vocab, d);
        let mut dpos = DenseMatrix::zeros(self.config.context, d);
        for (r, &t) in c.ids.iter().enumerate() {
            let g = dx.row(r);
            for (o, v) in dtok.row_mut(t).iter_mut().zip(g) {
                *o += v;
            }
            for (o, v) in dpos.row_mut(r % c.len).iter_mut().zip(g) {
                *o += v;
            }
        }
        self.tok_emb.grad = Some(dtok);
        self.pos_emb.grad = Some(dpos);
        Ok(())
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        let mut slot = 0;
        let param = |p: &mut Param, slot: &mut usize, f: &mut ParamVisitor<'_>| {
            p.visit(*slot, f);
            *slot += 1;
        };
        param(&mut self.tok_emb, &mut slot, f);
        param(&mut self.pos_emb, &mut slot, f);
        for b in &mut self.blocks {
            param(&mut b.ln1.gamma, &mut slot, f);
            param(&mut b.ln1.beta, &mut slot, f);
            param(&mut b.ln2.gamma, &mut slot, f);
            param(&mut b.ln2.beta, &mut slot, f);
            for l in b.linears_mut() {
                visit_linear(l, &mut slot, f);
            }
        }
        param(&mut self.ln_f.gamma, &mut slot, f);
        param(&mut self.ln_f.beta, &mut slot, f);
        param(&mut self.lm_head, &mut slot, f);
    }

    fn linears(&self) -> Vec<(String, &L)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, l) in LINEAR_NAMES.iter().zip(b.linears()) {
                out.push((format!("block{i}.{name}"), l));
            }
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<(String, &mut L)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, l) in LINEAR_NAMES.iter().zip(b.linears_mut()) {
                out.push((format!("block{i}.{name}"), l));
            }
        }
        out
    }

    fn fp_params(&self) -> Vec<(String, &Param)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.gamma"), &b.ln1.gamma));
            out.push((format!("block{i}.ln1.beta"), &b.ln1.beta));
            out.push((format!("block{i}.ln2.gamma"), &b.ln2.gamma));
            out.push((format!("block{i}.ln2.beta"), &b.ln2.beta));
        }
        out.push(("ln_f.gamma".to_string(), &self.ln_f.gamma));
        out.push(("ln_f.beta".to_string(), &self.ln_f.beta));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    fn fp_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.ln1.gamma"), &mut b.ln1.gamma));
            out.push((format!("block{i}.ln1.beta"), &mut b.ln1.beta));
            out.push((format!("block{i}.ln2.gamma"), &mut b.ln2.gamma));
            out.push((format!("block{i}.ln2.beta"), &mut b.ln2.beta));
        }
        out.push(("ln_f.gamma".to_string(), &mut self.ln_f.gamma));
        out.push(("ln_f.beta".to_string(), &mut self.ln_f.beta));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    fn num_hidden(&self) -> usize {
        self.blocks.len()
    }
}
