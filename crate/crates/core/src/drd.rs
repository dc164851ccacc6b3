//! Dense relation distillation.
//!
//! Query and support feature maps are each encoded into a key map (C/8
//! channels) and a value map (C/2 channels) by two parallel 3x3
//! convolutions; query and support encoders share the structure but not the
//! weights. Keys are compared pixel by pixel through two learned 1x1
//! projections, the similarities are softmax-normalised over the support
//! locations, and the attention-weighted support values are summed over
//! all support classes and concatenated after the query value map. The
//! result has C channels again, so it can replace the raw query feature.

use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{config_err, invalid, Result};
use crate::{Scalar, Tensor};

/// Key and value maps of one feature map.
#[derive(Clone, Copy, Debug)]
pub struct KeyValueMaps {
    /// `[C/8, H, W]`
    pub key: Var,
    /// `[C/2, H, W]`
    pub value: Var,
}

/// Per-class key/value maps of the support set.
#[derive(Clone, Debug)]
pub struct SupportKV {
    pub per_class: Vec<KeyValueMaps>,
}

impl SupportKV {
    pub fn len(&self) -> usize {
        self.per_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }
}

/// Row-stochastic `[Hq*Wq, Hs*Ws]` matrix for one support class.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
}

impl EncoderParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_channels(channels)?;
        let fan_in = channels * 9;
        let name = |s: &str| alloc::format!("{prefix}.{s}");
        Ok(EncoderParams {
            key_w: store.add(&name("key.weight"), Tensor::he_normal(&[channels / 8, channels, 3, 3], fan_in, rng))?,
            key_b: store.add(&name("key.bias"), Tensor::zeros(&[channels / 8]))?,
            value_w: store.add(&name("value.weight"), Tensor::he_normal(&[channels / 2, channels, 3, 3], fan_in, rng))?,
            value_b: store.add(&name("value.bias"), Tensor::zeros(&[channels / 2]))?,
        })
    }
}

/// Bias-free 1x1 projection of key maps, C/8 -> C/8.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionParams {
    pub weight: ParamId,
}

impl ProjectionParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        key_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Tensor::randn(&[key_channels, key_channels, 1, 1], libm::sqrt(1.0 / key_channels as f64), rng);
        Ok(ProjectionParams { weight: store.add(name, w)? })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DrdParams {
    pub channels: usize,
    pub query: EncoderParams,
    pub support: EncoderParams,
    pub phi: ProjectionParams,
    pub phi_prime: ProjectionParams,
}

impl DrdParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_channels(channels)?;
        let name = |s: &str| alloc::format!("{prefix}.{s}");
        Ok(DrdParams {
            channels,
            query: EncoderParams::new(store, &name("query_encoder"), channels, rng)?,
            support: EncoderParams::new(store, &name("support_encoder"), channels, rng)?,
            phi: ProjectionParams::new(store, &name("phi.weight"), channels / 8, rng)?,
            phi_prime: ProjectionParams::new(store, &name("phi_prime.weight"), channels / 8, rng)?,
        })
    }
}

fn check_channels(c: usize) -> Result<()> {
    if c == 0 || c % 8 != 0 {
        return Err(config_err!("feature dimension must be a positive multiple of 8, got {c}"));
    }
    Ok(())
}

fn encode<T: Scalar>(tape: &mut Tape<'_, T>, feat: Var, p: &EncoderParams) -> Result<KeyValueMaps> {
    let s = tape.shape(feat);
    if s.len() != 3 {
        return Err(invalid!("encoder input must be [C,H,W], got {:?}", s));
    }
    check_channels(s[0])?;
    let (kw, kb) = (tape.param(p.key_w), tape.param(p.key_b));
    let key = tape.conv2d(feat, kw, Some(kb), 1, 1)?;
    let (vw, vb) = (tape.param(p.value_w), tape.param(p.value_b));
    let value = tape.conv2d(feat, vw, Some(vb), 1, 1)?;
    Ok(KeyValueMaps { key, value })
}

/// Encodes the query feature with the query encoder.
pub fn encode_query<T: Scalar>(tape: &mut Tape<'_, T>, feat: Var, p: &DrdParams) -> Result<KeyValueMaps> {
    encode(tape, feat, &p.query)
}

/// Encodes each support feature independently with the support encoder.
pub fn encode_support<T: Scalar>(tape: &mut Tape<'_, T>, feats: &[Var], p: &DrdParams) -> Result<SupportKV> {
    let Some(&first) = feats.first() else {
        return Err(invalid!("encode_support needs at least one support feature"));
    };
    let shape = tape.shape(first).to_vec();
    if let Some(&bad) = feats.iter().find(|&&f| tape.shape(f) != shape.as_slice()) {
        return Err(invalid!("support features disagree in shape: {:?} vs {:?}", tape.shape(bad), shape));
    }
    let per_class = feats.iter().map(|&f| encode(tape, f, &p.support)).collect::<Result<_>>()?;
    Ok(SupportKV { per_class })
}

/// Applies a 1x1 projection to a key map and flattens it to `[C/8, H*W]`.
fn project<T: Scalar>(tape: &mut Tape<'_, T>, key: Var, p: &ProjectionParams) -> Result<Var> {
    let w = tape.param(p.weight);
    let proj = tape.conv2d(key, w, None, 1, 0)?;
    let s = tape.shape(proj).to_vec();
    tape.reshape(proj, &[s[0], s[1] * s[2]])
}

fn similarity_projected<T: Scalar>(tape: &mut Tape<'_, T>, q: Var, s: Var) -> Result<Var> {
    tape.matmul_t(q, s, true, false)
}

/// Pixel-wise similarity `phi(k_q[:, i]) . phi'(k_s[:, j])`, shaped
/// `[Hq*Wq, Hs*Ws]`.
pub fn similarity<T: Scalar>(
    tape: &mut Tape<'_, T>,
    k_q: Var,
    k_s: Var,
    phi: &ProjectionParams,
    phi_prime: &ProjectionParams,
) -> Result<Var> {
    let (cq, cs) = (tape.shape(k_q)[0], tape.shape(k_s)[0]);
    if cq != cs {
        return Err(invalid!("key channel mismatch: query {} vs support {}", cq, cs));
    }
    let q = project(tape, k_q, phi)?;
    let s = project(tape, k_s, phi_prime)?;
    similarity_projected(tape, q, s)
}

/// Softmax over support locations.
pub fn attend<T: Scalar>(tape: &mut Tape<'_, T>, sim: Var) -> Result<AttentionWeights> {
    if tape.shape(sim).len() != 2 {
        return Err(invalid!("similarity must be 2-D, got {:?}", tape.shape(sim)));
    }
    Ok(AttentionWeights { w: tape.softmax(sim, 1)? })
}

/// Output of [`distill`], with the intermediate attention kept for
/// inspection.
pub struct Distilled {
    /// `[C, Hq, Wq]`: query values followed by the retrieved support values.
    pub refined: Var,
    pub attention: Vec<AttentionWeights>,
}

/// Retrieves support values for every query pixel and returns the refined
/// query feature `concat[v_q, sum_n W_n * v_s,n]`.
pub fn distill<T: Scalar>(
    tape: &mut Tape<'_, T>,
    kv_q: &KeyValueMaps,
    support: &SupportKV,
    p: &DrdParams,
) -> Result<Distilled> {
    if support.is_empty() {
        return Err(invalid!("distill needs at least one support class"));
    }
    let vq_shape = tape.shape(kv_q.value).to_vec();
    let (cv, hq, wq) = (vq_shape[0], vq_shape[1], vq_shape[2]);
    let q = project(tape, kv_q.key, &p.phi)?;
    let mut retrieved: Option<Var> = None;
    let mut attention = Vec::with_capacity(support.len());
    for kv in &support.per_class {
        if tape.shape(kv.key)[0] != tape.shape(kv_q.key)[0] {
            return Err(invalid!("key channel mismatch between query and support"));
        }
        let vs = tape.shape(kv.value).to_vec();
        if vs[0] != cv {
            return Err(invalid!("value channel mismatch: query {} vs support {}", cv, vs[0]));
        }
        let s = project(tape, kv.key, &p.phi_prime)?;
        let sim = similarity_projected(tape, q, s)?;
        let att = attend(tape, sim)?;
        let v = tape.reshape(kv.value, &[vs[0], vs[1] * vs[2]])?;
        // [C/2, HWs] x [HWs, HWq]
        let r = tape.matmul_t(v, att.w, false, true)?;
        retrieved = Some(match retrieved {
            None => r,
            Some(acc) => tape.add(acc, r)?,
        });
        attention.push(att);
    }
    let vq = tape.reshape(kv_q.value, &[cv, hq * wq])?;
    let cat = tape.concat(&[vq, retrieved.expect("non-empty support")], 0)?;
    let refined = tape.reshape(cat, &[2 * cv, hq, wq])?;
    Ok(Distilled { refined, attention })
}

/// Full relation distillation from raw features.
pub fn refine<T: Scalar>(tape: &mut Tape<'_, T>, query: Var, supports: &[Var], p: &DrdParams) -> Result<Distilled> {
    let kv_q = encode_query(tape, query, p)?;
    let kv_s = encode_support(tape, supports, p)?;
    distill(tape, &kv_q, &kv_s, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize) -> (ParamStore<f64>, DrdParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = DrdParams::new(&mut store, "drd", c, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn encoder_shapes() {
        let (store, p) = setup(64);
        let mut tape = Tape::with_params(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = tape.constant(Tensor::randn(&[64, 16, 16], 1.0, &mut rng));
        let kv = encode_query(&mut tape, f, &p).unwrap();
        assert_eq!(tape.shape(kv.key), &[8, 16, 16]);
        assert_eq!(tape.shape(kv.value), &[32, 16, 16]);
        let sup = encode_support(&mut tape, &[f, f, f], &p).unwrap();
        assert_eq!(sup.len(), 3);
        assert_eq!(tape.value(sup.per_class[0].key), tape.value(sup.per_class[2].key));
        assert!(encode_support(&mut tape, &[], &p).is_err());
    }

    #[test]
    fn rejects_indivisible_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        assert!(matches!(DrdParams::new(&mut store, "d", 20, &mut rng), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_maps() {
        let (store, p) = setup(16);
        let mut tape = Tape::with_params(&store);
        let f = tape.constant(Tensor::zeros(&[16, 4, 4]));
        let kv = encode_query(&mut tape, f, &p).unwrap();
        assert!(tape.value(kv.key).iter().chain(tape.value(kv.value)).all(|&v| v == 0.0));
    }

    #[test]
    fn single_location_support_broadcasts_value() {
        let (store, p) = setup(16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::with_params(&store);
        let kq = tape.constant(Tensor::randn(&[2, 3, 3], 1.0, &mut rng));
        let vq = tape.constant(Tensor::randn(&[8, 3, 3], 1.0, &mut rng));
        let ks = tape.constant(Tensor::randn(&[2, 1, 1], 1.0, &mut rng));
        let vs = tape.constant(Tensor::randn(&[8, 1, 1], 1.0, &mut rng));
        let out = distill(
            &mut tape,
            &KeyValueMaps { key: kq, value: vq },
            &SupportKV { per_class: alloc::vec![KeyValueMaps { key: ks, value: vs }] },
            &p,
        )
        .unwrap();
        assert_eq!(tape.shape(out.refined), &[16, 3, 3]);
        let r = tape.value(out.refined);
        assert_eq!(&r[..72], tape.value(vq));
        for c in 0..8 {
            for px in 0..9 {
                assert!((r[72 + c * 9 + px] - tape.value(vs)[c]).abs() < 1e-15);
            }
        }
        assert!(tape.value(out.attention[0].w).iter().all(|&w| w == 1.0));
    }
}
