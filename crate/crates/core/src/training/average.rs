use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Element-wise mean of parameter stores with identical layouts. The sum
/// runs in f64, so averaging copies of one store returns it unchanged.
pub fn average_stores(stores: &[&ParamStore]) -> Result<ParamStore> {
    let first = *stores.first().ok_or_else(|| Error::Precondition("nothing to average".into()))?;
    for (i, s) in stores.iter().enumerate().skip(1) {
        if !first.same_layout(*s) {
            return Err(Error::IncompatibleCheckpoint(format!("store {i} has a different parameter layout")));
        }
    }
    let mut out = first.clone();
    let n = stores.len() as f64;
    let ids: Vec<_> = first.iter().map(|(id, _)| id).collect();
    for id in ids {
        let len = first.value(id).numel();
        let mut acc = alloc::vec![0.0f64; len];
        for s in stores {
            for (a, &v) in acc.iter_mut().zip(s.value(id).data()) {
                *a += v as f64;
            }
        }
        let shape = first.value(id).shape().to_vec();
        *out.value_mut(id) = Tensor::new(&shape, acc.into_iter().map(|a| (a / n) as f32).collect())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_identity() {
        let mut a = ParamStore::new();
        a.add_filled("w", &[1], 0.0).unwrap();
        let mut b = ParamStore::new();
        b.add_filled("w", &[1], 1.0).unwrap();
        assert_eq!(average_stores(&[&a, &b]).unwrap().value(a.id("w").unwrap()).data(), &[0.5]);
        let mut c = ParamStore::new();
        c.add_normal("x", &[3, 4], 1.0, &mut crate::rng::rng(1)).unwrap();
        assert_eq!(average_stores(&[&c, &c, &c, &c, &c]).unwrap(), c);
        let mut d = ParamStore::new();
        d.add_filled("w", &[2], 1.0).unwrap();
        assert!(matches!(average_stores(&[&a, &d]), Err(Error::IncompatibleCheckpoint(_))));
        assert!(average_stores(&[]).is_err());
    }
}
