use ndarray::{Array2, Axis, Zip};

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output `y`.
pub fn relu_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    Zip::from(y)
        .and(dy)
        .map_collect(|&y, &d| if y > 0.0 { d } else { 0.0 })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(sigmoid_scalar)
}

/// Gradient through a sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    Zip::from(y).and(dy).map_collect(|&y, &d| d * y * (1.0 - y))
}

/// Row-wise softmax.
pub fn softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.as_standard_layout().into_owned();
    for mut row in y.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    y
}

/// Gradient through a row-wise softmax given its output `y`:
/// `dx = y ⊙ (dy − Σ dy⊙y)`.
pub fn softmax_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(y.raw_dim());
    for ((yr, dyr), mut dxr) in y
        .axis_iter(Axis(0))
        .zip(dy.axis_iter(Axis(0)))
        .zip(dx.axis_iter_mut(Axis(0)))
    {
        let dot = yr.dot(&dyr);
        Zip::from(&mut dxr)
            .and(&yr)
            .and(&dyr)
            .for_each(|o, &y, &d| *o = y * (d - dot));
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn unit_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(relu(&array![[-1.0, 2.0]]), array![[0.0, 2.0]]);
        let s = softmax(&Array2::zeros((1, 4)));
        assert!(s.iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let y = sigmoid(&array![[-800.0, 800.0, 1e-3]]);
        assert!(y.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(y[[0, 0]] < 1e-300 && y[[0, 1]] == 1.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = array![[1000.0, 1001.0, -5.0], [0.3, -0.2, 0.1]];
        for row in softmax(&x).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_difference_quotient() {
        let x = array![[0.2, -0.4, 1.1, 0.0]];
        let dy = array![[0.3, -1.0, 0.5, 2.0]];
        let dx = softmax_backward(&softmax(&x), &dy);
        let h = 1e-6;
        for j in 0..4 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[[0, j]] += h;
            m[[0, j]] -= h;
            let f = |x: &Array2<f64>| (softmax(x) * &dy).sum();
            let num = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (num - dx[[0, j]]).abs() < 1e-8,
                "{j}: {num} vs {}",
                dx[[0, j]]
            );
        }
    }
}
