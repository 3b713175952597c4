//! Frozen toy transformer backbone over point patches.
//!
//! Clouds are patchified by farthest point sampling plus KNN grouping, each
//! group is embedded by a shared mini PointNet, and a pre-norm transformer
//! over [CLS; patches] harvests every layer's tokens and CLS. All weights
//! stay frozen except the CLS token. A small feature-file format lets
//! externally computed harvests stand in for the toy backbone.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn, PointSet};
use crate::graph::{Graph, NodeId};
use crate::init;
use crate::param::Param;
use crate::tensor::Tensor;

/// Widths of the shared per-point MLP and the post-pool projection.
const POINT_H1: usize = 64;
const POINT_H2: usize = 128;
const POST_H1: usize = 512;
const POST_H2: usize = 256;
/// Hidden width of the positional-encoding MLP.
const POS_HIDDEN: usize = 128;
/// FFN expansion ratio of each transformer layer.
const FFN_RATIO: usize = 4;
const LN_EPS: f64 = 1e-5;

const MAGIC: &[u8; 4] = b"PMAF";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct PatchSet {
    pub centers: PointSet,
    /// M x D_tok patch features.
    pub embeddings: Tensor,
    pub group_indices: Vec<Vec<usize>>,
}

/// Per-layer features recorded during a backbone pass.
#[derive(Debug, Clone)]
pub struct LayerHarvest {
    /// L matrices of shape M x D_tok.
    pub tokens: Vec<Tensor>,
    /// L CLS vectors of width D_tok.
    pub cls: Vec<Tensor>,
    pub centers: PointSet,
}

impl LayerHarvest {
    pub fn layer_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn patch_count(&self) -> usize {
        self.centers.len()
    }

    pub fn token_width(&self) -> usize {
        self.tokens.first().map_or(0, Tensor::cols)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.tokens.len();
        if l == 0 || self.cls.len() != l {
            return Err(Error::InvalidArgument {
                op: "LayerHarvest",
                reason: format!("{} token layers vs {} cls layers", l, self.cls.len()),
            });
        }
        let m = self.patch_count();
        let d = self.token_width();
        for (i, t) in self.tokens.iter().enumerate() {
            if t.rows() != m || t.cols() != d {
                return Err(Error::ShapeMismatch {
                    op: "LayerHarvest",
                    lhs: t.shape().to_vec(),
                    rhs: vec![m, d],
                });
            }
            if self.cls[i].numel() != d {
                return Err(Error::ShapeMismatch {
                    op: "LayerHarvest",
                    lhs: self.cls[i].shape().to_vec(),
                    rhs: vec![d],
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PatchEmbedParams {
    pub point1_w: Param,
    pub point1_b: Param,
    pub point2_w: Param,
    pub point2_b: Param,
    pub post1_w: Param,
    pub post1_b: Param,
    pub post2_w: Param,
    pub post2_b: Param,
    pub post3_w: Param,
    pub post3_b: Param,
}

#[derive(Debug, Clone)]
pub struct PosEncodeParams {
    pub hidden_w: Param,
    pub hidden_b: Param,
    pub out_w: Param,
    pub out_b: Param,
}

#[derive(Debug, Clone)]
pub struct TransformerLayerParams {
    pub ln1_gamma: Param,
    pub ln1_beta: Param,
    pub qkv_w: Param,
    pub qkv_b: Param,
    pub attn_out_w: Param,
    pub attn_out_b: Param,
    pub ln2_gamma: Param,
    pub ln2_beta: Param,
    pub ffn1_w: Param,
    pub ffn1_b: Param,
    pub ffn2_w: Param,
    pub ffn2_b: Param,
}

impl TransformerLayerParams {
    fn new(prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> TransformerLayerParams {
        let name = |field: &str| format!("{prefix}.{field}");
        let ffn = FFN_RATIO * d;
        TransformerLayerParams {
            ln1_gamma: Param::new(name("ln1.gamma"), Tensor::vector(vec![1.0; d]), false),
            ln1_beta: Param::new(name("ln1.beta"), Tensor::zeros(&[d]), false),
            qkv_w: Param::new(
                name("qkv.weight"),
                init::scaled_uniform(rng, d, vec![d, 3 * d]),
                false,
            ),
            qkv_b: Param::new(name("qkv.bias"), Tensor::zeros(&[3 * d]), false),
            attn_out_w: Param::new(
                name("attn_out.weight"),
                init::scaled_uniform(rng, d, vec![d, d]),
                false,
            ),
            attn_out_b: Param::new(name("attn_out.bias"), Tensor::zeros(&[d]), false),
            ln2_gamma: Param::new(name("ln2.gamma"), Tensor::vector(vec![1.0; d]), false),
            ln2_beta: Param::new(name("ln2.beta"), Tensor::zeros(&[d]), false),
            ffn1_w: Param::new(
                name("ffn1.weight"),
                init::scaled_uniform(rng, d, vec![d, ffn]),
                false,
            ),
            ffn1_b: Param::new(name("ffn1.bias"), Tensor::zeros(&[ffn]), false),
            ffn2_w: Param::new(
                name("ffn2.weight"),
                init::scaled_uniform(rng, ffn, vec![ffn, d]),
                false,
            ),
            ffn2_b: Param::new(name("ffn2.bias"), Tensor::zeros(&[d]), false),
        }
    }

    fn params(&self) -> Vec<Param> {
        vec![
            self.ln1_gamma.clone(),
            self.ln1_beta.clone(),
            self.qkv_w.clone(),
            self.qkv_b.clone(),
            self.attn_out_w.clone(),
            self.attn_out_b.clone(),
            self.ln2_gamma.clone(),
            self.ln2_beta.clone(),
            self.ffn1_w.clone(),
            self.ffn1_b.clone(),
            self.ffn2_w.clone(),
            self.ffn2_b.clone(),
        ]
    }
}

/// The whole backbone: patch embed, positional MLP, L transformer layers,
/// and the trainable CLS token. Everything except CLS is frozen.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub patch: PatchEmbedParams,
    pub pos: PosEncodeParams,
    pub layers: Vec<TransformerLayerParams>,
    pub cls: Param,
    pub m: usize,
    pub d_tok: usize,
    pub heads: usize,
    pub k_patch: usize,
}

impl BackboneParams {
    pub fn new(
        prefix: &str,
        l: usize,
        m: usize,
        d_tok: usize,
        heads: usize,
        k_patch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<BackboneParams> {
        if l == 0 || m == 0 || k_patch == 0 {
            return Err(Error::InvalidArgument {
                op: "BackboneParams",
                reason: "layer, patch, and group counts must be positive".into(),
            });
        }
        if heads == 0 || d_tok % heads != 0 {
            return Err(Error::InvalidArgument {
                op: "BackboneParams",
                reason: format!("{heads} heads do not divide token width {d_tok}"),
            });
        }
        let name = |field: &str| format!("{prefix}.{field}");
        let patch = PatchEmbedParams {
            point1_w: Param::new(
                name("patch.point1.weight"),
                init::scaled_uniform(rng, 3, vec![3, POINT_H1]),
                false,
            ),
            point1_b: Param::new(name("patch.point1.bias"), Tensor::zeros(&[POINT_H1]), false),
            point2_w: Param::new(
                name("patch.point2.weight"),
                init::scaled_uniform(rng, POINT_H1, vec![POINT_H1, POINT_H2]),
                false,
            ),
            point2_b: Param::new(name("patch.point2.bias"), Tensor::zeros(&[POINT_H2]), false),
            post1_w: Param::new(
                name("patch.post1.weight"),
                init::scaled_uniform(rng, POINT_H2, vec![POINT_H2, POST_H1]),
                false,
            ),
            post1_b: Param::new(name("patch.post1.bias"), Tensor::zeros(&[POST_H1]), false),
            post2_w: Param::new(
                name("patch.post2.weight"),
                init::scaled_uniform(rng, POST_H1, vec![POST_H1, POST_H2]),
                false,
            ),
            post2_b: Param::new(name("patch.post2.bias"), Tensor::zeros(&[POST_H2]), false),
            post3_w: Param::new(
                name("patch.post3.weight"),
                init::scaled_uniform(rng, POST_H2, vec![POST_H2, d_tok]),
                false,
            ),
            post3_b: Param::new(name("patch.post3.bias"), Tensor::zeros(&[d_tok]), false),
        };
        let pos = PosEncodeParams {
            hidden_w: Param::new(
                name("pos.hidden.weight"),
                init::scaled_uniform(rng, 3, vec![3, POS_HIDDEN]),
                false,
            ),
            hidden_b: Param::new(name("pos.hidden.bias"), Tensor::zeros(&[POS_HIDDEN]), false),
            out_w: Param::new(
                name("pos.out.weight"),
                init::scaled_uniform(rng, POS_HIDDEN, vec![POS_HIDDEN, d_tok]),
                false,
            ),
            out_b: Param::new(name("pos.out.bias"), Tensor::zeros(&[d_tok]), false),
        };
        let layers = (0..l)
            .map(|i| TransformerLayerParams::new(&name(&format!("layer{i}")), d_tok, rng))
            .collect();
        let cls = Param::new(
            name("cls"),
            init::scaled_uniform(rng, d_tok, vec![1, d_tok]),
            true,
        );
        Ok(BackboneParams {
            patch,
            pos,
            layers,
            cls,
            m,
            d_tok,
            heads,
            k_patch,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Every parameter including the trainable CLS token.
    pub fn params(&self) -> Vec<Param> {
        let mut out = vec![
            self.patch.point1_w.clone(),
            self.patch.point1_b.clone(),
            self.patch.point2_w.clone(),
            self.patch.point2_b.clone(),
            self.patch.post1_w.clone(),
            self.patch.post1_b.clone(),
            self.patch.post2_w.clone(),
            self.patch.post2_b.clone(),
            self.patch.post3_w.clone(),
            self.patch.post3_b.clone(),
            self.pos.hidden_w.clone(),
            self.pos.hidden_b.clone(),
            self.pos.out_w.clone(),
            self.pos.out_b.clone(),
        ];
        for layer in &self.layers {
            out.extend(layer.params());
        }
        out.push(self.cls.clone());
        out
    }

    /// Everything that must never move during fine-tuning.
    pub fn frozen_params(&self) -> Vec<Param> {
        let mut out = self.params();
        out.retain(|p| p.id() != self.cls.id());
        out
    }
}

fn linear(g: &mut Graph, x: NodeId, w: &Param, b: &Param) -> Result<NodeId> {
    let wn = g.param(w);
    let bn = g.param(b);
    let y = g.matmul(x, wn)?;
    g.add_bias(y, bn)
}

/// FPS centers, KNN groups re-centered on their center, and mini-PointNet
/// embeddings per patch.
pub fn patchify(
    ps: &PointSet,
    m: usize,
    k_patch: usize,
    seed_index: usize,
    params: &BackboneParams,
) -> Result<PatchSet> {
    let n = ps.len();
    if k_patch == 0 || k_patch > n {
        return Err(Error::InvalidArgument {
            op: "patchify",
            reason: format!("group size {k_patch} out of range for {n} points"),
        });
    }
    let center_indices = farthest_point_sample(ps, m, seed_index)?;
    let mut group_indices = Vec::with_capacity(m);
    let mut g = Graph::new();
    let mut pooled = Vec::with_capacity(m);
    for &ci in &center_indices {
        let group = knn(ps, ci, k_patch)?;
        let center = ps.point(ci);
        let mut offsets = Vec::with_capacity(k_patch * 3);
        for &pi in &group {
            let p = ps.point(pi);
            offsets.extend([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
        }
        let pts = g.leaf(Tensor::new(vec![k_patch, 3], offsets)?);
        let h = linear(&mut g, pts, &params.patch.point1_w, &params.patch.point1_b)?;
        let h = g.silu(h)?;
        let h = linear(&mut g, h, &params.patch.point2_w, &params.patch.point2_b)?;
        let h = g.silu(h)?;
        pooled.push(g.max_rows(h)?);
        group_indices.push(group);
    }
    let stacked = g.concat_rows(&pooled)?;
    let h = linear(&mut g, stacked, &params.patch.post1_w, &params.patch.post1_b)?;
    let h = g.silu(h)?;
    let h = linear(&mut g, h, &params.patch.post2_w, &params.patch.post2_b)?;
    let h = g.silu(h)?;
    let emb = linear(&mut g, h, &params.patch.post3_w, &params.patch.post3_b)?;
    let embeddings = g.value(emb).clone();

    let center_rows: Vec<Vec<f64>> = center_indices
        .iter()
        .map(|&i| ps.tensor().row(i).to_vec())
        .collect();
    let centers = PointSet::new(Tensor::from_rows(&center_rows)?)?;
    Ok(PatchSet {
        centers,
        embeddings,
        group_indices,
    })
}

/// Two-layer MLP over raw center coordinates.
pub fn positional_encode(params: &BackboneParams, centers: &PointSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let c = g.leaf(centers.tensor().clone());
    let h = linear(&mut g, c, &params.pos.hidden_w, &params.pos.hidden_b)?;
    let h = g.silu(h)?;
    let out = linear(&mut g, h, &params.pos.out_w, &params.pos.out_b)?;
    Ok(g.value(out).clone())
}

fn self_attention(
    g: &mut Graph,
    layer: &TransformerLayerParams,
    x: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let d = g.value(x).cols();
    let head_dim = d / heads;
    let qkv = linear(g, x, &layer.qkv_w, &layer.qkv_b)?;
    let q = g.slice_cols(qkv, 0, d)?;
    let k = g.slice_cols(qkv, d, 2 * d)?;
    let v = g.slice_cols(qkv, 2 * d, 3 * d)?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
        let alpha = g.softmax_rows(scaled)?;
        head_outs.push(g.matmul(alpha, vh)?);
    }
    let cat = g.concat_cols(&head_outs)?;
    linear(g, cat, &layer.attn_out_w, &layer.attn_out_b)
}

/// Pre-norm transformer over [CLS; tokens], positional encodings added to the
/// token rows at every layer. Returns per-layer token matrices (M x D) and
/// CLS rows (1 x D) as graph nodes so gradients reach the CLS parameter.
pub fn transformer_harvest(
    g: &mut Graph,
    params: &BackboneParams,
    embeddings: NodeId,
    pos: NodeId,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let m = g.value(embeddings).rows();
    let d = g.value(embeddings).cols();
    if d != params.d_tok || g.value(pos).shape() != [m, d] {
        return Err(Error::ShapeMismatch {
            op: "transformer_harvest",
            lhs: g.value(embeddings).shape().to_vec(),
            rhs: g.value(pos).shape().to_vec(),
        });
    }
    let cls = g.param(&params.cls);
    let mut seq = g.concat_rows(&[cls, embeddings])?;
    let mut tokens = Vec::with_capacity(params.layers.len());
    let mut cls_rows = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let cls_prev = g.slice_rows(seq, 0, 1)?;
        let tok_prev = g.slice_rows(seq, 1, m + 1)?;
        let tok_in = g.add(tok_prev, pos)?;
        let input = g.concat_rows(&[cls_prev, tok_in])?;

        let n1g = g.param(&layer.ln1_gamma);
        let n1b = g.param(&layer.ln1_beta);
        let normed = g.layer_norm_rows(input, n1g, n1b, LN_EPS)?;
        let attn = self_attention(g, layer, normed, params.heads)?;
        let x1 = g.add(input, attn)?;

        let n2g = g.param(&layer.ln2_gamma);
        let n2b = g.param(&layer.ln2_beta);
        let normed2 = g.layer_norm_rows(x1, n2g, n2b, LN_EPS)?;
        let h = linear(g, normed2, &layer.ffn1_w, &layer.ffn1_b)?;
        let h = g.silu(h)?;
        let ffn = linear(g, h, &layer.ffn2_w, &layer.ffn2_b)?;
        seq = g.add(x1, ffn)?;

        tokens.push(g.slice_rows(seq, 1, m + 1)?);
        cls_rows.push(g.slice_rows(seq, 0, 1)?);
    }
    Ok((tokens, cls_rows))
}

/// Full frozen pass over one cloud: patchify, encode positions, run the
/// transformer, and record every layer's tokens and CLS values.
pub fn backbone_forward(ps: &PointSet, params: &BackboneParams) -> Result<LayerHarvest> {
    let patches = patchify(ps, params.m, params.k_patch, 0, params)?;
    let pos = positional_encode(params, &patches.centers)?;
    let mut g = Graph::new();
    let e = g.leaf(patches.embeddings);
    let p = g.leaf(pos);
    let (tok_ids, cls_ids) = transformer_harvest(&mut g, params, e, p)?;
    let tokens = tok_ids.iter().map(|&id| g.value(id).clone()).collect();
    let cls = cls_ids
        .iter()
        .map(|&id| Tensor::vector(g.value(id).data().to_vec()))
        .collect();
    Ok(LayerHarvest {
        tokens,
        cls,
        centers: patches.centers,
    })
}

fn push_f32(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn dim_u16(value: usize, offset: u64, what: &str) -> Result<u16> {
    u16::try_from(value).map_err(|_| Error::Format {
        offset,
        reason: format!("{what} {value} exceeds the 16-bit header field"),
    })
}

/// Writes a harvest in the little-endian feature interchange format:
/// 16-byte header (magic, version, L, M, D_tok), then tokens layer-major,
/// CLS per layer, and centers, all as 32-bit floats.
pub fn dump_features(h: &LayerHarvest, path: &Path) -> Result<()> {
    h.validate()?;
    let l = h.layer_count();
    let m = h.patch_count();
    let d = h.token_width();
    let mut buf = Vec::with_capacity(16 + 4 * (l * m * d + l * d + m * 3));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&dim_u16(l, 8, "layer count")?.to_le_bytes());
    buf.extend_from_slice(&dim_u16(m, 10, "patch count")?.to_le_bytes());
    buf.extend_from_slice(&dim_u16(d, 12, "token width")?.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for t in &h.tokens {
        push_f32(&mut buf, t.data());
    }
    for c in &h.cls {
        push_f32(&mut buf, c.data());
    }
    push_f32(&mut buf, h.centers.tensor().data());
    fs::write(path, buf)?;
    Ok(())
}

fn read_u16(bytes: &[u8], offset: usize) -> u16 {
    u16::from_le_bytes([bytes[offset], bytes[offset + 1]])
}

fn read_block(bytes: &[u8], offset: usize, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| {
            let at = offset + 4 * i;
            f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as f64
        })
        .collect()
}

/// Reads a feature file back; every format violation reports the byte offset
/// where it was detected.
pub fn load_features(path: &Path) -> Result<LayerHarvest> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            reason: format!("file ends after {} bytes, 16-byte header required", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected PMAF".into(),
        });
    }
    let version = read_u16(&bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    if read_u16(&bytes, 6) != 0 {
        return Err(Error::Format {
            offset: 6,
            reason: "reserved field must be zero".into(),
        });
    }
    let l = read_u16(&bytes, 8) as usize;
    let m = read_u16(&bytes, 10) as usize;
    let d = read_u16(&bytes, 12) as usize;
    for (dim, offset, what) in [(l, 8, "layer count"), (m, 10, "patch count"), (d, 12, "token width")] {
        if dim == 0 {
            return Err(Error::Format {
                offset,
                reason: format!("{what} must be positive"),
            });
        }
    }
    if read_u16(&bytes, 14) != 0 {
        return Err(Error::Format {
            offset: 14,
            reason: "reserved field must be zero".into(),
        });
    }
    let expected = 16 + 4 * (l * m * d + l * d + m * 3);
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            reason: format!("truncated: expected {expected} bytes, found {}", bytes.len()),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            reason: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let mut offset = 16;
    let mut tokens = Vec::with_capacity(l);
    for _ in 0..l {
        tokens.push(Tensor::new(vec![m, d], read_block(&bytes, offset, m * d))?);
        offset += 4 * m * d;
    }
    let mut cls = Vec::with_capacity(l);
    for _ in 0..l {
        cls.push(Tensor::vector(read_block(&bytes, offset, d)));
        offset += 4 * d;
    }
    let centers_offset = offset;
    let centers =
        PointSet::new(Tensor::new(vec![m, 3], read_block(&bytes, offset, m * 3))?).map_err(
            |_| Error::Format {
                offset: centers_offset as u64,
                reason: "centers must be finite".into(),
            },
        )?;
    let harvest = LayerHarvest {
        tokens,
        cls,
        centers,
    };
    harvest.validate()?;
    Ok(harvest)
}
