//! Single-stream ViT over the concatenated template/search token sequence.

use rand::Rng;

use crate::config::ViTConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{trunc_normal, Graph, ParamStore, Session, Tensor, Var};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

/// Token matrix produced by block `layer` (0 = patch embedding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub template_len: usize,
    pub search_len: usize,
    pub layer: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.template_len + self.search_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn block_prefix(layer: usize) -> String {
    format!("blocks.{layer:02}")
}

pub(crate) fn register_params<R: Rng>(store: &mut ParamStore, cfg: &ViTConfig, rng: &mut R) -> Result<()> {
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;
    store.insert("embed.proj.weight", trunc_normal(&[cfg.patch_dim(), d], INIT_STD, rng))?;
    store.insert("embed.proj.bias", Tensor::zeros(&[d]))?;
    store.insert("embed.pos", trunc_normal(&[cfg.total_tokens(), d], INIT_STD, rng))?;
    for l in 1..=cfg.depth {
        let p = block_prefix(l);
        store.insert(format!("{p}.norm1.gain"), Tensor::ones(&[d]))?;
        store.insert(format!("{p}.norm1.bias"), Tensor::zeros(&[d]))?;
        store.insert(format!("{p}.attn.qkv.weight"), trunc_normal(&[d, 3 * d], INIT_STD, rng))?;
        store.insert(format!("{p}.attn.qkv.bias"), Tensor::zeros(&[3 * d]))?;
        store.insert(format!("{p}.attn.proj.weight"), trunc_normal(&[d, d], INIT_STD, rng))?;
        store.insert(format!("{p}.attn.proj.bias"), Tensor::zeros(&[d]))?;
        store.insert(format!("{p}.norm2.gain"), Tensor::ones(&[d]))?;
        store.insert(format!("{p}.norm2.bias"), Tensor::zeros(&[d]))?;
        store.insert(format!("{p}.mlp.fc1.weight"), trunc_normal(&[d, hidden], INIT_STD, rng))?;
        store.insert(format!("{p}.mlp.fc1.bias"), Tensor::zeros(&[hidden]))?;
        store.insert(format!("{p}.mlp.fc2.weight"), trunc_normal(&[hidden, d], INIT_STD, rng))?;
        store.insert(format!("{p}.mlp.fc2.bias"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

/// Flattens an image into one row per `patch x patch` tile, tiles in
/// row-major order, features ordered (channel, row, column).
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    if img.height() % patch != 0 || img.width() % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} not divisible into {patch}x{patch} patches",
            img.height(),
            img.width()
        )));
    }
    let (gh, gw) = (img.height() / patch, img.width() / patch);
    let dim = img.channels() * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..img.channels() {
                for i in 0..patch {
                    for j in 0..patch {
                        data.push(img.get(c, py * patch + i, px * patch + j));
                    }
                }
            }
        }
    }
    Tensor::new(&[gh * gw, dim], data)
}

fn check_image(img: &Image, side: usize, channels: usize, what: &str) -> Result<()> {
    if img.height() != side || img.width() != side || img.channels() != channels {
        return Err(Error::InvalidArgument(format!(
            "{what} image is {}x{}x{}, expected {channels}x{side}x{side}",
            img.channels(),
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Linear projection of each patch of `[template, search]` plus a learned
/// positional table.
pub fn patch_embed(s: &mut Session, cfg: &ViTConfig, template: &Image, search: &Image) -> Result<TokenSequence> {
    check_image(template, cfg.template_side, cfg.channels, "template")?;
    check_image(search, cfg.search_side, cfg.channels, "search")?;
    let zp = patchify(template, cfg.patch_size)?;
    let xp = patchify(search, cfg.patch_size)?;
    let (kz, kx) = (zp.shape()[0], xp.shape()[0]);
    let mut rows = zp.into_data();
    rows.extend(xp.into_data());
    let patches = s.constant_from(&[kz + kx, cfg.patch_dim()], rows)?;
    let w = s.param("embed.proj.weight")?;
    let b = s.param("embed.proj.bias")?;
    let pos = s.param("embed.pos")?;
    let proj = s.matmul(patches, w)?;
    let proj = s.add(proj, b)?;
    let tokens = s.add(proj, pos)?;
    Ok(TokenSequence {
        tokens,
        template_len: kz,
        search_len: kx,
        layer: 0,
    })
}

/// Multi-head self-attention over the rows of `x`.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    qkv_weight: Var,
    qkv_bias: Var,
    proj_weight: Var,
    proj_bias: Var,
    heads: usize,
) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / heads;
    let qkv = g.matmul(x, qkv_weight)?;
    let qkv = g.add(qkv, qkv_bias)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, d + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, 1)?;
        outs.push(g.matmul(attn, v)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let y = g.matmul(merged, proj_weight)?;
    g.add(y, proj_bias)
}

/// Pre-norm transformer block `layer`: `x + MHA(LN(x))`, then `+ MLP(LN(.))`.
pub fn block_forward(s: &mut Session, cfg: &ViTConfig, t: &TokenSequence, layer: usize) -> Result<TokenSequence> {
    if layer == 0 || layer > cfg.depth || t.layer + 1 != layer {
        return Err(Error::InvalidArgument(format!(
            "block {layer} cannot consume tokens from layer {}",
            t.layer
        )));
    }
    let p = block_prefix(layer);
    let x = t.tokens;

    let g1 = s.param(&format!("{p}.norm1.gain"))?;
    let b1 = s.param(&format!("{p}.norm1.bias"))?;
    let qkv_w = s.param(&format!("{p}.attn.qkv.weight"))?;
    let qkv_b = s.param(&format!("{p}.attn.qkv.bias"))?;
    let proj_w = s.param(&format!("{p}.attn.proj.weight"))?;
    let proj_b = s.param(&format!("{p}.attn.proj.bias"))?;
    let h = s.layer_norm(x, g1, b1, LN_EPS)?;
    let a = multi_head_attention(s, h, qkv_w, qkv_b, proj_w, proj_b, cfg.num_heads)?;
    let x = s.add(x, a)?;

    let g2 = s.param(&format!("{p}.norm2.gain"))?;
    let b2 = s.param(&format!("{p}.norm2.bias"))?;
    let fc1_w = s.param(&format!("{p}.mlp.fc1.weight"))?;
    let fc1_b = s.param(&format!("{p}.mlp.fc1.bias"))?;
    let fc2_w = s.param(&format!("{p}.mlp.fc2.weight"))?;
    let fc2_b = s.param(&format!("{p}.mlp.fc2.bias"))?;
    let h = s.layer_norm(x, g2, b2, LN_EPS)?;
    let h = s.matmul(h, fc1_w)?;
    let h = s.add(h, fc1_b)?;
    let h = s.gelu(h);
    let h = s.matmul(h, fc2_w)?;
    let h = s.add(h, fc2_b)?;
    let tokens = s.add(x, h)?;
    Ok(TokenSequence {
        tokens,
        layer,
        ..*t
    })
}

/// Embedding followed by all `depth` blocks; returns layers `0..=depth`.
pub fn full_forward(s: &mut Session, cfg: &ViTConfig, template: &Image, search: &Image) -> Result<Vec<TokenSequence>> {
    let mut layers = Vec::with_capacity(cfg.depth + 1);
    let mut t = patch_embed(s, cfg, template, search)?;
    layers.push(t);
    for l in 1..=cfg.depth {
        t = block_forward(s, cfg, &t, l)?;
        layers.push(t);
    }
    Ok(layers)
}

/// Template-token rows `0..K_z`.
pub fn template_slice(g: &mut Graph, t: &TokenSequence) -> Result<Var> {
    g.narrow(t.tokens, 0, t.template_len)
}

/// Search-token rows `K_z..K`.
pub fn search_slice(g: &mut Graph, t: &TokenSequence) -> Result<Var> {
    g.narrow(t.tokens, t.template_len, t.search_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small_cfg() -> ViTConfig {
        ViTConfig {
            depth: 2,
            embed_dim: 16,
            num_heads: 2,
            template_side: 16,
            search_side: 32,
            enforced_blocks: 1,
            ..Default::default()
        }
    }

    fn noise_image(side: usize, seed: u64) -> Image {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * side * side).map(|_| rng.gen::<f64>()).collect();
        Image::new(3, side, side, data).unwrap()
    }

    #[test]
    fn token_counts() {
        let cfg = small_cfg();
        let store = init_params(&cfg, 0).unwrap();
        let mut s = Session::inference(&store);
        let t = patch_embed(&mut s, &cfg, &noise_image(16, 1), &noise_image(32, 2)).unwrap();
        assert_eq!((t.template_len, t.search_len, t.len()), (4, 16, 20));
        assert_eq!(s.shape(t.tokens), &[20, 16]);
        let z = template_slice(&mut s, &t).unwrap();
        assert_eq!(s.shape(z), &[4, 16]);
        let x = search_slice(&mut s, &t).unwrap();
        let joined = s.concat(&[z, x]).unwrap();
        assert_eq!(s.value(joined), s.value(t.tokens));
    }

    #[test]
    fn zero_everything_gives_zero_tokens() {
        let cfg = small_cfg();
        let mut store = init_params(&cfg, 0).unwrap();
        for name in ["embed.proj.weight", "embed.pos"] {
            store.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut s = Session::inference(&store);
        let t = patch_embed(&mut s, &cfg, &Image::filled(3, 16, 16, 0.0), &Image::filled(3, 32, 32, 0.0)).unwrap();
        assert!(s.value(t.tokens).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_side_rejected() {
        let cfg = small_cfg();
        let store = init_params(&cfg, 0).unwrap();
        let mut s = Session::inference(&store);
        assert!(patch_embed(&mut s, &cfg, &noise_image(24, 1), &noise_image(32, 2)).is_err());
        assert!(patchify(&noise_image(12, 1), 8).is_err());
    }

    #[test]
    fn swapping_search_patches_permutes_rows() {
        let cfg = small_cfg();
        let mut store = init_params(&cfg, 3).unwrap();
        store.get_mut("embed.pos").unwrap().data_mut().fill(0.0);
        let z = noise_image(16, 1);
        let x = noise_image(32, 2);
        // swap patch (0,0) with patch (2,3) in the search image
        let mut x2 = x.clone();
        for c in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    let (a, b) = (x.get(c, i, j), x.get(c, 16 + i, 24 + j));
                    x2.set(c, i, j, b);
                    x2.set(c, 16 + i, 24 + j, a);
                }
            }
        }
        let mut s = Session::inference(&store);
        let t1 = patch_embed(&mut s, &cfg, &z, &x).unwrap();
        let t2 = patch_embed(&mut s, &cfg, &z, &x2).unwrap();
        let (a, b) = (s.value(t1.tokens).to_vec(), s.value(t2.tokens).to_vec());
        let d = 16;
        let row = |v: &[f64], r: usize| v[r * d..(r + 1) * d].to_vec();
        let (ra, rb) = (4, 4 + 2 * 4 + 3);
        for r in 0..20 {
            let expect = if r == ra { row(&a, rb) } else if r == rb { row(&a, ra) } else { row(&a, r) };
            assert_eq!(row(&b, r), expect, "row {r}");
        }
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let cfg = small_cfg();
        let mut store = init_params(&cfg, 5).unwrap();
        for name in ["attn.proj", "mlp.fc2"] {
            for part in ["weight", "bias"] {
                let full = format!("{}.{name}.{part}", block_prefix(1));
                store.get_mut(&full).unwrap().data_mut().fill(0.0);
            }
        }
        let mut s = Session::inference(&store);
        let t0 = patch_embed(&mut s, &cfg, &noise_image(16, 1), &noise_image(32, 2)).unwrap();
        let t1 = block_forward(&mut s, &cfg, &t0, 1).unwrap();
        assert_eq!(s.value(t1.tokens), s.value(t0.tokens));
        assert_eq!(s.shape(t1.tokens), s.shape(t0.tokens));
        assert_eq!(t1.layer, 1);
        assert!(block_forward(&mut s, &cfg, &t0, 2).is_err());
    }

    #[test]
    fn hand_computed_single_head_attention() {
        // two tokens in R^2, identity projections: softmax(X X^T / sqrt 2) X
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap());
        let mut eye3 = vec![0.0; 12];
        for i in 0..2 {
            for blk in 0..3 {
                eye3[i * 6 + blk * 2 + i] = 1.0;
            }
        }
        let qkv_w = g.constant(&Tensor::matrix(2, 6, eye3).unwrap());
        let qkv_b = g.constant(&Tensor::zeros(&[6]));
        let proj_w = g.constant(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let proj_b = g.constant(&Tensor::zeros(&[2]));
        let y = multi_head_attention(&mut g, x, qkv_w, qkv_b, proj_w, proj_b, 1).unwrap();

        let s = 1.0 / 2f64.sqrt();
        // scores row 0: [1, 0] * s ; row 1: [0, 4] * s
        let a0 = [s.exp(), 1.0];
        let a1 = [1.0, (4.0 * s).exp()];
        let n0 = a0[0] + a0[1];
        let n1 = a1[0] + a1[1];
        let expect = [
            a0[0] / n0 * 1.0,
            a0[1] / n0 * 2.0,
            a1[0] / n1 * 1.0,
            a1[1] / n1 * 2.0,
        ];
        for (got, want) in g.value(y).iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn full_forward_is_deterministic_and_composes() {
        let cfg = small_cfg();
        let store = init_params(&cfg, 9).unwrap();
        let (z, x) = (noise_image(16, 1), noise_image(32, 2));
        let run = || {
            let mut s = Session::inference(&store);
            let layers = full_forward(&mut s, &cfg, &z, &x).unwrap();
            layers.iter().map(|t| s.value(t.tokens).to_vec()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), cfg.depth + 1);
        assert_eq!(a, b);

        let mut s = Session::inference(&store);
        let t0 = patch_embed(&mut s, &cfg, &z, &x).unwrap();
        let t1 = block_forward(&mut s, &cfg, &t0, 1).unwrap();
        assert_eq!(s.value(t1.tokens), &a[1][..]);
    }
}
