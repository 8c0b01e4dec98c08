//! Instance tokens from point clouds and word tokens from token ids.

use crate::datagen::rng::Rng;
use crate::datagen::Scene;
use crate::error::{Error, Result};
use crate::nn::{residual_norm, Attention, Embedding, FeedForward, LayerNorm, Linear};
use crate::tensor::{Graph, ParamStore, Tensor, Var, MASK_NEG};

/// Instance embeddings `[f_i, c_i, a_i]`, `K x (d + 6)`, with the centroids
/// they were built from.
#[derive(Clone, Debug)]
pub struct InstanceTokens {
    pub embeddings: Var,
    pub centroids: Vec<[f64; 3]>,
}

/// Word embeddings `|W| x (d + 6)` with their ids and padding flags.
#[derive(Clone, Debug)]
pub struct WordTokens {
    pub embeddings: Var,
    pub ids: Vec<u32>,
    pub pad: Vec<bool>,
    /// Self-attention weights of every encoder layer.
    pub attention: Vec<Var>,
}

impl WordTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Additive mask hiding padded keys from `queries` query rows.
    pub fn key_mask(&self, queries: usize) -> Option<Tensor> {
        key_padding_mask(&self.pad, queries)
    }
}

pub fn key_padding_mask(pad: &[bool], queries: usize) -> Option<Tensor> {
    if !pad.iter().any(|&p| p) {
        return None;
    }
    let row: Vec<f64> = pad.iter().map(|&p| if p { MASK_NEG } else { 0.0 }).collect();
    Some(Tensor::matrix(
        queries,
        pad.len(),
        row.iter().copied().cycle().take(queries * pad.len()).collect(),
    ))
}

/// Per-point perceptron `6 -> d -> d` with a relu hidden layer.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub hidden: Linear,
    pub out: Linear,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut Rng) -> Self {
        PointEncoder {
            hidden: Linear::new(store, "points.hidden", 6, d, rng),
            out: Linear::new(store, "points.out", d, d, rng),
        }
    }

    pub fn encode_points(&self, g: &mut Graph, points: Var) -> Result<Var> {
        let h = self.hidden.forward(g, points)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

/// Masked mean pooling of point features per instance, concatenated with
/// the instance centroid and mean color.
pub fn pool_instances(
    g: &mut Graph,
    features: Var,
    masks: &Tensor,
    centroids: &[[f64; 3]],
    mean_colors: &[[f64; 3]],
) -> Result<InstanceTokens> {
    let (k, n) = masks.dims2()?;
    if g.value(features).rows() != n {
        return Err(Error::Shape {
            op: "pool_instances",
            detail: format!("{} feature rows for {n} mask columns", g.value(features).rows()),
        });
    }
    if centroids.len() != k || mean_colors.len() != k {
        return Err(Error::Shape {
            op: "pool_instances",
            detail: format!("{k} masks, {} centroids, {} colors", centroids.len(), mean_colors.len()),
        });
    }
    let mut inv_counts = Vec::with_capacity(k);
    for i in 0..k {
        let count: f64 = masks.row(i).iter().sum();
        if count <= 0.0 {
            return Err(Error::EmptyInstance(i));
        }
        inv_counts.push(1.0 / count);
    }
    let mask = g.constant(masks.clone());
    let summed = g.matmul(mask, features)?;
    let pooled = g.scale_rows(summed, inv_counts)?;
    let flat = |v: &[[f64; 3]]| Tensor::matrix(k, 3, v.iter().flatten().copied().collect());
    let c = g.constant(flat(centroids));
    let a = g.constant(flat(mean_colors));
    let embeddings = g.concat_last_dim(&[pooled, c, a])?;
    Ok(InstanceTokens {
        embeddings,
        centroids: centroids.to_vec(),
    })
}

pub fn encode_scene(g: &mut Graph, encoder: &PointEncoder, scene: &Scene) -> Result<InstanceTokens> {
    let points = g.constant(scene.points.clone());
    let features = encoder.encode_points(g, points)?;
    pool_instances(
        g,
        features,
        &scene.instance_masks,
        &scene.centroids,
        &scene.mean_colors,
    )
}

pub fn sinusoidal_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, dim, data)
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: Attention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

/// Token embedding, sinusoidal positions, self-attention layers and a final
/// projection; all widths are `d + 6`.
#[derive(Clone, Debug)]
pub struct WordEncoder {
    embedding: Embedding,
    layers: Vec<EncoderLayer>,
    proj: Linear,
    vocab_size: usize,
    dim: usize,
}

impl WordEncoder {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let embedding = Embedding::new(store, "words.embedding", vocab_size, dim, rng);
        let layers = (0..layers)
            .map(|l| {
                let p = format!("words.layer{l}");
                Ok(EncoderLayer {
                    attn: Attention::new(store, &format!("{p}.attn"), dim, heads, rng)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), dim),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), dim, ffn_dim, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), dim),
                })
            })
            .collect::<Result<_>>()?;
        Ok(WordEncoder {
            embedding,
            layers,
            proj: Linear::new(store, "words.proj", dim, dim, rng),
            vocab_size,
            dim,
        })
    }

    pub fn encode_words(&self, g: &mut Graph, ids: &[u32], pad: &[bool]) -> Result<WordTokens> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if pad.len() != ids.len() {
            return Err(Error::Shape {
                op: "encode_words",
                detail: format!("{} pad flags for {} tokens", pad.len(), ids.len()),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::UnknownToken(bad));
        }
        if pad.iter().all(|&p| p) {
            return Err(Error::AllPadding);
        }
        let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let emb = self.embedding.forward(g, &rows)?;
        let pe = g.constant(sinusoidal_encoding(ids.len(), self.dim));
        let mut x = g.add(emb, pe)?;
        let mask = key_padding_mask(pad, ids.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer.attn.forward(g, x, x, mask.as_ref())?;
            attention.extend(a.probs);
            x = residual_norm(g, x, a.out, &layer.norm1)?;
            let f = layer.ffn.forward(g, x)?;
            x = residual_norm(g, x, f, &layer.norm2)?;
        }
        let embeddings = self.proj.forward(g, x)?;
        Ok(WordTokens {
            embeddings,
            ids: ids.to_vec(),
            pad: pad.to_vec(),
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn random(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn point_encoder_shapes_and_zero_weights() {
        let mut store = ParamStore::new();
        let enc = PointEncoder::new(&mut store, 8, &mut rng(1));
        let mut g = Graph::with_params(&store);
        let p = g.constant(Tensor::matrix(1, 6, vec![0.1; 6]));
        let f = enc.encode_points(&mut g, p).unwrap();
        assert_eq!(g.value(f).shape(), &[1, 8]);

        let mut zeroed = store.clone();
        for id in store.ids() {
            zeroed.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::with_params(&zeroed);
        let p = g.constant(random(&mut rng(2), 5, 6));
        let f = enc.encode_points(&mut g, p).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0], vec![7.0, -2.0]]).unwrap());
        let masks = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let c = [[0.5, 0.5, 0.5], [1.0, 2.0, 3.0]];
        let a = [[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]];
        let t = pool_instances(&mut g, f, &masks, &c, &a).unwrap();
        let e = g.value(t.embeddings);
        assert_eq!(e.shape(), &[2, 8]);
        assert_eq!(e.row(0), &[2.0, 2.0, 0.5, 0.5, 0.5, 0.1, 0.2, 0.3]);
        assert_eq!(e.row(1), &[7.0, -2.0, 1.0, 2.0, 3.0, 0.9, 0.8, 0.7]);
    }

    #[test]
    fn pooling_rejects_empty_instance() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(2, 2));
        let masks = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let r = pool_instances(&mut g, f, &masks, &[[0.0; 3]; 2], &[[0.0; 3]; 2]);
        assert!(matches!(r, Err(Error::EmptyInstance(1))));
    }

    #[test]
    fn pooling_matches_loop_oracle_and_is_permutation_equivariant() {
        let mut r = rng(5);
        for _ in 0..100 {
            let (k, n, d) = (r.gen_range(1..5), r.gen_range(4..12), r.gen_range(1..5));
            let feats = random(&mut r, n, d);
            let mut owner: Vec<Option<usize>> = (0..n).map(|_| (r.gen_bool(0.8)).then(|| r.gen_range(0..k))).collect();
            for i in 0..k {
                owner[i] = Some(i);
            }
            let mut masks = Tensor::zeros(k, n);
            for (j, o) in owner.iter().enumerate() {
                if let Some(i) = o {
                    masks.data_mut()[i * n + j] = 1.0;
                }
            }
            let c: Vec<[f64; 3]> = (0..k).map(|i| [i as f64, 0.5, -1.0]).collect();
            let a: Vec<[f64; 3]> = (0..k).map(|i| [0.1 * i as f64, 0.2, 0.3]).collect();
            let mut g = Graph::new();
            let fv = g.constant(feats.clone());
            let tok = pool_instances(&mut g, fv, &masks, &c, &a).unwrap();
            let e = g.value(tok.embeddings).clone();
            for i in 0..k {
                let members: Vec<usize> = (0..n).filter(|&j| owner[j] == Some(i)).collect();
                for col in 0..d {
                    let mean = members.iter().map(|&j| feats.get(j, col)).sum::<f64>() / members.len() as f64;
                    assert!((e.get(i, col) - mean).abs() < 1e-12);
                }
                assert_eq!(&e.row(i)[d..d + 3], &c[i]);
                assert_eq!(&e.row(i)[d + 3..], &a[i]);
            }
            // reversing the instance order reverses the output rows
            let perm: Vec<usize> = (0..k).rev().collect();
            let pm = Tensor::matrix(k, n, perm.iter().flat_map(|&i| masks.row(i).to_vec()).collect());
            let pc: Vec<[f64; 3]> = perm.iter().map(|&i| c[i]).collect();
            let pa: Vec<[f64; 3]> = perm.iter().map(|&i| a[i]).collect();
            let tok2 = pool_instances(&mut g, fv, &pm, &pc, &pa).unwrap();
            let e2 = g.value(tok2.embeddings);
            for (row, &i) in perm.iter().enumerate() {
                assert_eq!(e2.row(row), e.row(i));
            }
        }
    }

    fn word_encoder(store: &mut ParamStore) -> WordEncoder {
        WordEncoder::new(store, 20, 10, 2, 1, 10, &mut rng(3)).unwrap()
    }

    #[test]
    fn word_shapes_errors_and_order_sensitivity() {
        let mut store = ParamStore::new();
        let enc = word_encoder(&mut store);
        let mut g = Graph::with_params(&store);
        let w = enc.encode_words(&mut g, &[4], &[false]).unwrap();
        assert_eq!(g.value(w.embeddings).shape(), &[1, 10]);
        assert!(matches!(enc.encode_words(&mut g, &[25], &[false]), Err(Error::UnknownToken(25))));
        assert!(matches!(enc.encode_words(&mut g, &[2, 3], &[true, true]), Err(Error::AllPadding)));

        let a = enc.encode_words(&mut g, &[5, 6, 7], &[false; 3]).unwrap();
        let b = enc.encode_words(&mut g, &[6, 5, 7], &[false; 3]).unwrap();
        assert_ne!(g.value(a.embeddings).row(2), g.value(b.embeddings).row(2));
    }

    #[test]
    fn pad_keys_get_zero_attention() {
        let mut store = ParamStore::new();
        let enc = word_encoder(&mut store);
        let mut g = Graph::with_params(&store);
        let pad = [false, false, true, false, true];
        let w = enc.encode_words(&mut g, &[5, 6, 0, 7, 0], &pad).unwrap();
        assert_eq!(w.attention.len(), 2);
        for &p in &w.attention {
            let probs = g.value(p);
            for q in 0..5 {
                if pad[q] {
                    continue;
                }
                let row = probs.row(q);
                for (key, &is_pad) in pad.iter().enumerate() {
                    if is_pad {
                        assert_eq!(row[key], 0.0);
                    }
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
