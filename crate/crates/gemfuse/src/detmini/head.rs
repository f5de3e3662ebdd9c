//! Miniature transformer encoder-decoder detection head.
//!
//! One encoder layer over the flattened fused feature grid (with fixed
//! sinusoidal positional encodings) and one decoder layer over N learned
//! object queries, single-head attention throughout, model width 32. Each
//! query embedding feeds a classification head (K real classes plus
//! no-object) and a sigmoid-bounded box regressor in normalized cx/cy/w/h.

use rand_chacha::ChaCha8Rng;

use crate::tensorcore::{Graph, ParamGroup, Result, Tensor, TensorError};

/// Head dimensions. `in_channels` must match the fused volume fed in
/// (concatenating fusion modes double the backbone channel count).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub dim: usize,
    pub queries: usize,
    pub classes: usize,
    pub ffn_hidden: usize,
}

impl HeadConfig {
    pub fn toy(in_channels: usize, classes: usize) -> Self {
        HeadConfig { in_channels, dim: 32, queries: 10, classes, ffn_hidden: 64 }
    }

    pub fn num_outputs(&self) -> usize {
        self.classes + 1
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionParams {
    fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            wq: xavier2(dim, dim, rng),
            wk: xavier2(dim, dim, rng),
            wv: xavier2(dim, dim, rng),
            wo: xavier2(dim, dim, rng),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.wk"), &self.wk);
        f(&format!("{prefix}.wv"), &self.wv);
        f(&format!("{prefix}.wo"), &self.wo);
    }

    fn map(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor) -> Result<Tensor>,
    ) -> Result<Self> {
        Ok(AttentionParams {
            wq: f(&format!("{prefix}.wq"), &self.wq)?,
            wk: f(&format!("{prefix}.wk"), &self.wk)?,
            wv: f(&format!("{prefix}.wv"), &self.wv)?,
            wo: f(&format!("{prefix}.wo"), &self.wo)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    fn init(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FfnParams {
            w1: xavier2(dim, hidden, rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: xavier2(hidden, dim, rng),
            b2: Tensor::zeros(vec![dim]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.b2"), &self.b2);
    }

    fn map(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &Tensor) -> Result<Tensor>,
    ) -> Result<Self> {
        Ok(FfnParams {
            w1: f(&format!("{prefix}.w1"), &self.w1)?,
            b1: f(&format!("{prefix}.b1"), &self.b1)?,
            w2: f(&format!("{prefix}.w2"), &self.w2)?,
            b2: f(&format!("{prefix}.b2"), &self.b2)?,
        })
    }
}

/// All learned parameters of the detection head, including the object
/// queries.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub encoder_attn: AttentionParams,
    pub encoder_ffn: FfnParams,
    pub queries: Tensor,
    pub decoder_self: AttentionParams,
    pub decoder_cross: AttentionParams,
    pub decoder_ffn: FfnParams,
    pub class_w: Tensor,
    pub class_b: Tensor,
    pub box_w: Tensor,
    pub box_b: Tensor,
}

impl HeadParams {
    pub fn init(cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        HeadParams {
            proj_w: xavier2(cfg.in_channels, cfg.dim, rng),
            proj_b: Tensor::zeros(vec![cfg.dim]),
            encoder_attn: AttentionParams::init(cfg.dim, rng),
            encoder_ffn: FfnParams::init(cfg.dim, cfg.ffn_hidden, rng),
            queries: xavier2(cfg.queries, cfg.dim, rng),
            decoder_self: AttentionParams::init(cfg.dim, rng),
            decoder_cross: AttentionParams::init(cfg.dim, rng),
            decoder_ffn: FfnParams::init(cfg.dim, cfg.ffn_hidden, rng),
            class_w: xavier2(cfg.dim, cfg.classes + 1, rng),
            class_b: Tensor::zeros(vec![cfg.classes + 1]),
            box_w: xavier2(cfg.dim, 4, rng),
            box_b: Tensor::zeros(vec![4]),
        }
    }
}

impl ParamGroup for HeadParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("proj.w", &self.proj_w);
        f("proj.b", &self.proj_b);
        self.encoder_attn.visit("enc.attn", f);
        self.encoder_ffn.visit("enc.ffn", f);
        f("queries", &self.queries);
        self.decoder_self.visit("dec.self", f);
        self.decoder_cross.visit("dec.cross", f);
        self.decoder_ffn.visit("dec.ffn", f);
        f("class.w", &self.class_w);
        f("class.b", &self.class_b);
        f("box.w", &self.box_w);
        f("box.b", &self.box_b);
    }

    fn map(&self, f: &mut dyn FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(HeadParams {
            proj_w: f("proj.w", &self.proj_w)?,
            proj_b: f("proj.b", &self.proj_b)?,
            encoder_attn: self.encoder_attn.map("enc.attn", f)?,
            encoder_ffn: self.encoder_ffn.map("enc.ffn", f)?,
            queries: f("queries", &self.queries)?,
            decoder_self: self.decoder_self.map("dec.self", f)?,
            decoder_cross: self.decoder_cross.map("dec.cross", f)?,
            decoder_ffn: self.decoder_ffn.map("dec.ffn", f)?,
            class_w: f("class.w", &self.class_w)?,
            class_b: f("class.b", &self.class_b)?,
            box_w: f("box.w", &self.box_w)?,
            box_b: f("box.b", &self.box_b)?,
        })
    }
}

fn xavier2(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::rand_uniform(vec![rows, cols], -a, a, rng)
}

/// Fixed 2D sinusoidal positional encoding for an h x w grid, flattened
/// row-major to [h*w, dim]. Half the dims encode x, half y. `dim` must be a
/// multiple of 4.
pub fn positional_encoding(h: usize, w: usize, dim: usize) -> Tensor {
    assert!(dim % 4 == 0, "positional encoding dim must be a multiple of 4");
    let half = dim / 2;
    let pairs = half / 2;
    let mut data = vec![0.0; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * dim;
            for i in 0..pairs {
                let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / half as f64);
                data[row + 2 * i] = (x as f64 * freq).sin();
                data[row + 2 * i + 1] = (x as f64 * freq).cos();
                data[row + half + 2 * i] = (y as f64 * freq).sin();
                data[row + half + 2 * i + 1] = (y as f64 * freq).cos();
            }
        }
    }
    Tensor::new(vec![h * w, dim], data).expect("positional encodings are finite")
}

fn attention(
    g: &Graph,
    xq: &Tensor,
    xkv: &Tensor,
    p: &AttentionParams,
    dim: usize,
) -> Result<Tensor> {
    let q = g.matmul(xq, &p.wq)?;
    let k = g.matmul(xkv, &p.wk)?;
    let v = g.matmul(xkv, &p.wv)?;
    let scores = g.matmul(&q, &g.transpose(&k)?)?;
    let scaled = g.scale(&scores, 1.0 / (dim as f64).sqrt())?;
    let weights = g.softmax_temp(&scaled, 1, 1.0)?;
    let mixed = g.matmul(&weights, &v)?;
    g.matmul(&mixed, &p.wo)
}

fn ffn(g: &Graph, x: &Tensor, p: &FfnParams) -> Result<Tensor> {
    let h = g.add_bias_rows(&g.matmul(x, &p.w1)?, &p.b1)?;
    let h = g.relu(&h)?;
    g.add_bias_rows(&g.matmul(&h, &p.w2)?, &p.b2)
}

/// Run encoder and decoder over an already-flattened [S, C] feature sequence
/// with explicit positional encodings [S, dim]. Equivariance tests permute
/// `seq` and `posenc` together through this entry point.
pub fn encode_decode_sequence(
    g: &Graph,
    seq: &Tensor,
    posenc: &Tensor,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<Tensor> {
    if seq.shape().len() != 2 || seq.shape()[1] != cfg.in_channels {
        return Err(TensorError::InvalidShape {
            op: "encode_decode",
            detail: format!(
                "sequence {:?} incompatible with configured input projection {}",
                seq.shape(),
                cfg.in_channels
            ),
        });
    }
    let proj_w = g.input(&params.proj_w)?;
    let proj_b = g.input(&params.proj_b)?;
    let pe = g.input(posenc)?;

    let x = g.add_bias_rows(&g.matmul(seq, &proj_w)?, &proj_b)?;
    let x = g.add(&x, &pe)?;

    // Encoder layer: self-attention and feed-forward, both residual.
    let enc_attn = params.encoder_attn.map("enc", &mut |_, t| g.input(t))?;
    let enc_ffn = params.encoder_ffn.map("enc", &mut |_, t| g.input(t))?;
    let x = g.add(&x, &attention(g, &x, &x, &enc_attn, cfg.dim)?)?;
    let memory = g.add(&x, &ffn(g, &x, &enc_ffn)?)?;

    // Decoder layer: query self-attention, cross-attention into the encoder
    // memory, feed-forward; all residual.
    let queries = g.input(&params.queries)?;
    let dec_self = params.decoder_self.map("dec", &mut |_, t| g.input(t))?;
    let dec_cross = params.decoder_cross.map("dec", &mut |_, t| g.input(t))?;
    let dec_ffn = params.decoder_ffn.map("dec", &mut |_, t| g.input(t))?;
    let q = g.add(&queries, &attention(g, &queries, &queries, &dec_self, cfg.dim)?)?;
    let q = g.add(&q, &attention(g, &q, &memory, &dec_cross, cfg.dim)?)?;
    g.add(&q, &ffn(g, &q, &dec_ffn)?)
}

/// Full head entry point: flatten a fused CxHxW volume to a sequence, attach
/// positional encodings, and return the N decoder embeddings [N, dim].
pub fn encode_decode(
    g: &Graph,
    fused: &Tensor,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<Tensor> {
    let s = fused.shape();
    if s.len() != 3 || s[0] != cfg.in_channels {
        return Err(TensorError::InvalidShape {
            op: "encode_decode",
            detail: format!(
                "fused volume {:?} incompatible with configured input projection {}",
                s, cfg.in_channels
            ),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = g.reshape(fused, vec![c, h * w])?;
    let seq = g.transpose(&flat)?;
    let posenc = positional_encoding(h, w, cfg.dim);
    encode_decode_sequence(g, &seq, &posenc, params, cfg)
}

/// Class logits [N, classes+1] and sigmoid-bounded boxes [N, 4] from the
/// decoder embeddings.
pub fn predict_heads(
    g: &Graph,
    embeddings: &Tensor,
    params: &HeadParams,
) -> Result<(Tensor, Tensor)> {
    let cw = g.input(&params.class_w)?;
    let cb = g.input(&params.class_b)?;
    let bw = g.input(&params.box_w)?;
    let bb = g.input(&params.box_b)?;
    let logits = g.add_bias_rows(&g.matmul(embeddings, &cw)?, &cb)?;
    let boxes = g.sigmoid(&g.add_bias_rows(&g.matmul(embeddings, &bw)?, &bb)?)?;
    Ok((logits, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_setup(seed: u64) -> (HeadConfig, HeadParams) {
        let cfg = HeadConfig::toy(8, 3);
        let params = HeadParams::init(&cfg, &mut rng(seed));
        (cfg, params)
    }

    #[test]
    fn output_count_is_query_count() {
        let (cfg, params) = toy_setup(1);
        let g = Graph::new();
        let fused = g
            .input(&Tensor::rand_uniform(vec![8, 4, 4], -1.0, 1.0, &mut rng(2)))
            .unwrap();
        let emb = encode_decode(&g, &fused, &params, &cfg).unwrap();
        assert_eq!(emb.shape(), &[cfg.queries, cfg.dim]);
        let (logits, boxes) = predict_heads(&g, &emb, &params).unwrap();
        assert_eq!(logits.shape(), &[10, 4]);
        assert_eq!(boxes.shape(), &[10, 4]);
        assert!(boxes.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (cfg, params) = toy_setup(3);
        let g = Graph::new();
        let fused = g.input(&Tensor::zeros(vec![5, 4, 4])).unwrap();
        assert!(encode_decode(&g, &fused, &params, &cfg).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        // Recompute the encoder attention weights directly.
        let (cfg, params) = toy_setup(4);
        let g = Graph::new();
        let x = g
            .input(&Tensor::rand_uniform(vec![6, cfg.dim], -1.0, 1.0, &mut rng(5)))
            .unwrap();
        let wq = g.input(&params.encoder_attn.wq).unwrap();
        let wk = g.input(&params.encoder_attn.wk).unwrap();
        let q = g.matmul(&x, &wq).unwrap();
        let k = g.matmul(&x, &wk).unwrap();
        let scores = g.matmul(&q, &g.transpose(&k).unwrap()).unwrap();
        let scaled = g.scale(&scores, 1.0 / (cfg.dim as f64).sqrt()).unwrap();
        let weights = g.softmax_temp(&scaled, 1, 1.0).unwrap();
        for row in 0..6 {
            let s: f64 = weights.data()[row * 6..(row + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn spatial_permutation_with_posenc_leaves_output_unchanged() {
        let (cfg, params) = toy_setup(6);
        let (h, w) = (2, 2);
        let mut r = rng(7);
        let seq_data = Tensor::rand_uniform(vec![h * w, cfg.in_channels], -1.0, 1.0, &mut r);
        let posenc = positional_encoding(h, w, cfg.dim);

        let run = |perm: &[usize]| {
            let permute_rows = |t: &Tensor, width: usize| {
                let mut out = vec![0.0; t.numel()];
                for (new_row, &old_row) in perm.iter().enumerate() {
                    out[new_row * width..(new_row + 1) * width]
                        .copy_from_slice(&t.data()[old_row * width..(old_row + 1) * width]);
                }
                Tensor::new(t.shape().to_vec(), out).unwrap()
            };
            let g = Graph::new();
            let seq = g.input(&permute_rows(&seq_data, cfg.in_channels)).unwrap();
            let pe = permute_rows(&posenc, cfg.dim);
            encode_decode_sequence(&g, &seq, &pe, &params, &cfg)
                .unwrap()
                .data()
                .to_vec()
        };

        let base = run(&[0, 1, 2, 3]);
        let shuffled = run(&[2, 0, 3, 1]);
        for i in 0..base.len() {
            assert!(
                (base[i] - shuffled[i]).abs() < 1e-9,
                "output moved by {} at {i}",
                (base[i] - shuffled[i]).abs()
            );
        }
    }

    #[test]
    fn query_reorder_reorders_outputs() {
        let (cfg, mut params) = toy_setup(8);
        let g = Graph::new();
        let fused_data = Tensor::rand_uniform(vec![8, 4, 4], -1.0, 1.0, &mut rng(9));

        let fused = g.input(&fused_data).unwrap();
        let base = encode_decode(&g, &fused, &params, &cfg).unwrap().data().to_vec();

        // Reverse the query rows.
        let qshape = params.queries.shape().to_vec();
        let (n, d) = (qshape[0], qshape[1]);
        let mut rev = vec![0.0; n * d];
        for i in 0..n {
            rev[i * d..(i + 1) * d]
                .copy_from_slice(&params.queries.data()[(n - 1 - i) * d..(n - i) * d]);
        }
        params.queries = Tensor::new(qshape, rev).unwrap();

        let g2 = Graph::new();
        let fused2 = g2.input(&fused_data).unwrap();
        let flipped = encode_decode(&g2, &fused2, &params, &cfg).unwrap().data().to_vec();

        for i in 0..n {
            for j in 0..d {
                let a = base[i * d + j];
                let b = flipped[(n - 1 - i) * d + j];
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn head_gradients_check_out() {
        use crate::tensorcore::gradcheck::{check_gradient, DEFAULT_STEP, DEFAULT_TOLERANCE};
        let cfg = HeadConfig { in_channels: 4, dim: 8, queries: 3, classes: 2, ffn_hidden: 8 };
        let params = HeadParams::init(&cfg, &mut rng(10));
        let fused = Tensor::rand_uniform(vec![4, 2, 2], -1.0, 1.0, &mut rng(11));
        let report = check_gradient(
            &|g: &Graph, inp: &[Tensor]| {
                let p = HeadParams {
                    proj_w: inp[1].clone(),
                    queries: inp[2].clone(),
                    ..params.clone()
                };
                let emb = encode_decode(g, &inp[0], &p, &cfg)?;
                let (logits, boxes) = predict_heads(g, &emb, &p)?;
                let sm = g.softmax_temp(&logits, 1, 1.0)?;
                let a = g.sum(&g.hadamard(&sm, &sm)?)?;
                let b = g.sum(&boxes)?;
                g.add(&a, &b)
            },
            &[fused, params.proj_w.clone(), params.queries.clone()],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }
}
