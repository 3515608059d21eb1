use crate::{Error, Result, Var};

/// Scaled dot-product attention `softmax(q·kᵀ/√d)·v` for `q: [n_q, d]`,
/// `k: [n_k, d]`, `v: [n_k, d_v]`.
pub fn attention<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::Shape(format!(
            "attention q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    if ks[0] == 0 {
        return Err(Error::Shape("attention needs at least one key".into()));
    }
    let scores = q
        .matmul(&k.transpose()?)?
        .scale(1.0 / (qs[1] as f64).sqrt());
    scores.softmax()?.matmul(v)
}

/// Attention over independent groups: `q: [B, n_q, d]`, `k: [B, n_k, d]`,
/// `v: [B, n_k, d_v]`.
pub fn attention_batched<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3
        || ks.len() != 3
        || vs.len() != 3
        || qs[0] != ks[0]
        || ks[0] != vs[0]
        || qs[2] != ks[2]
        || ks[1] != vs[1]
    {
        return Err(Error::Shape(format!(
            "batched attention q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    if ks[1] == 0 {
        return Err(Error::Shape("attention needs at least one key".into()));
    }
    let scores = q.bmm(&k.transpose()?)?.scale(1.0 / (qs[2] as f64).sqrt());
    scores.softmax()?.bmm(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_returns_its_value() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = tape.constant(Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(vec![1, 4], 1.0, &mut rng));
        let v = tape.constant(Tensor::new(vec![1, 2], vec![0.25, -1.5]).unwrap());
        let out = attention(&q, &k, &v).unwrap().value();
        for row in out.data().chunks(2) {
            assert_eq!(row, &[0.25, -1.5]);
        }
    }

    #[test]
    fn equal_scores_average_values() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(vec![2, 3]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = tape.constant(Tensor::randn(vec![4, 3], 1.0, &mut rng));
        let vt = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let v = tape.constant(vt.clone());
        let out = attention(&q, &k, &v).unwrap().value();
        for c in 0..2 {
            let mean = (0..4).map(|r| vt.data()[r * 2 + c]).sum::<f64>() / 4.0;
            assert!((out.data()[c] - mean).abs() < 1e-15);
            assert!((out.data()[2 + c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(vec![2, 3]));
        let k = tape.constant(Tensor::zeros(vec![4, 2]));
        let v = tape.constant(Tensor::zeros(vec![4, 2]));
        assert!(attention(&q, &k, &v).is_err());
        let k = tape.constant(Tensor::zeros(vec![0, 3]));
        let v = tape.constant(Tensor::zeros(vec![0, 2]));
        assert!(attention(&q, &k, &v).is_err());
    }
}
