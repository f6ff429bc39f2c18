use super::{Scalar, Tensor};

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mx = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let s = e.iter().fold(T::zero(), |a, &b| a + b);
    e.into_iter().map(|v| v / s).collect()
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.row_len();
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.data.chunks_exact(k) {
        data.extend(softmax(row));
    }
    Tensor { shape: logits.shape.clone(), data }
}

/// Mean natural-log cross-entropy.
pub fn cce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> T {
    let k = logits.row_len();
    let mut total = 0.0;
    for (row, &y) in logits.data.chunks_exact(k).zip(labels) {
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)).as_f64();
        let lse = mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
        total += lse - row[y as usize].as_f64();
    }
    T::of(total / labels.len() as f64)
}

/// Gradient of the mean CCE with respect to the logits: `(softmax - onehot)/n`.
pub fn cce_grad<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Tensor<T> {
    let mut p = softmax_rows(logits);
    let k = p.row_len();
    let inv = T::of(1.0 / labels.len() as f64);
    for (row, &y) in p.data.chunks_exact_mut(k).zip(labels) {
        row[y as usize] = row[y as usize] - T::one();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    p
}
