//! Layer primitives with exact analytic gradients: valid 2-d convolution via
//! im2col, 2x2 max pooling with deterministic tie-breaking, spatial average
//! pooling, dense layers, and leaky ReLU.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2};

pub fn conv_out_size(input: usize, kernel: usize, stride: usize) -> usize {
    assert!(input >= kernel, "input {input} smaller than kernel {kernel}");
    (input - kernel) / stride + 1
}

fn im2col(input: &Array3<f64>, kernel: usize, stride: usize) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let oh = conv_out_size(h, kernel, stride);
    let ow = conv_out_size(w, kernel, stride);
    let mut cols = Array2::<f64>::zeros((c * kernel * kernel, oh * ow));
    for ch in 0..c {
        for kr in 0..kernel {
            for kc in 0..kernel {
                let row = (ch * kernel + kr) * kernel + kc;
                for or in 0..oh {
                    let ir = or * stride + kr;
                    for oc in 0..ow {
                        cols[[row, or * ow + oc]] = input[[ch, ir, oc * stride + kc]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    shape: (usize, usize, usize),
    kernel: usize,
    stride: usize,
) -> Array3<f64> {
    let (c, h, w) = shape;
    let oh = conv_out_size(h, kernel, stride);
    let ow = conv_out_size(w, kernel, stride);
    let mut dinput = Array3::<f64>::zeros(shape);
    for ch in 0..c {
        for kr in 0..kernel {
            for kc in 0..kernel {
                let row = (ch * kernel + kr) * kernel + kc;
                for or in 0..oh {
                    let ir = or * stride + kr;
                    for oc in 0..ow {
                        dinput[[ch, ir, oc * stride + kc]] += dcols[[row, or * ow + oc]];
                    }
                }
            }
        }
    }
    dinput
}

fn weights_as_matrix(w: &Array4<f64>) -> Array2<f64> {
    let (o, c, kh, kw) = w.dim();
    w.to_shape((o, c * kh * kw)).expect("contiguous kernel").to_owned()
}

/// Valid convolution, pre-activation output.
pub fn conv2d_forward(
    input: &Array3<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
) -> Array3<f64> {
    let (o, _, k, _) = w.dim();
    let (_, h, wd) = input.dim();
    let oh = conv_out_size(h, k, stride);
    let ow = conv_out_size(wd, k, stride);
    let cols = im2col(input, k, stride);
    let mut out = weights_as_matrix(w).dot(&cols);
    for (mut row, &bias) in out.rows_mut().into_iter().zip(b.iter()) {
        row += bias;
    }
    out.into_shape((o, oh, ow)).expect("conv output shape")
}

/// Gradients of a valid convolution wrt input, weights, and bias.
pub fn conv2d_backward(
    input: &Array3<f64>,
    w: &Array4<f64>,
    stride: usize,
    dout: &Array3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (o, c, k, _) = w.dim();
    let (oc, oh, ow) = dout.dim();
    assert_eq!(o, oc);
    let cols = im2col(input, k, stride);
    let dout2 = dout.to_shape((o, oh * ow)).expect("contiguous dout").to_owned();
    let dw2 = dout2.dot(&cols.t());
    let dw = dw2.into_shape((o, c, k, k)).expect("dw shape");
    let db = dout2.sum_axis(ndarray::Axis(1));
    let dcols = weights_as_matrix(w).t().dot(&dout2);
    let dinput = col2im(&dcols, input.dim(), k, stride);
    (dinput, dw, db)
}

/// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
/// Ties go to the first element in row-major window order.
pub fn maxpool2_forward(input: &Array3<f64>) -> (Array3<f64>, Vec<u32>) {
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut idx = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for or in 0..oh {
            for oc in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_flat = 0u32;
                for dr in 0..2 {
                    for dc in 0..2 {
                        let (r, cl) = (or * 2 + dr, oc * 2 + dc);
                        let v = input[[ch, r, cl]];
                        if v > best {
                            best = v;
                            best_flat = ((ch * h + r) * w + cl) as u32;
                        }
                    }
                }
                out[[ch, or, oc]] = best;
                idx[(ch * oh + or) * ow + oc] = best_flat;
            }
        }
    }
    (out, idx)
}

/// Routes gradient only to the recorded argmax positions.
pub fn maxpool2_backward(
    input_shape: (usize, usize, usize),
    idx: &[u32],
    dout: &Array3<f64>,
) -> Array3<f64> {
    let mut dinput = Array3::<f64>::zeros(input_shape);
    let flat = dinput.as_slice_mut().expect("contiguous");
    for (&i, &g) in idx.iter().zip(dout.iter()) {
        flat[i as usize] += g;
    }
    dinput
}

/// Non-overlapping spatial average pooling by an integer factor; trailing
/// remainder rows/columns are dropped.
pub fn avgpool_forward(input: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ch in 0..c {
        for or in 0..oh {
            for oc in 0..ow {
                let mut acc = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        acc += input[[ch, or * factor + dr, oc * factor + dc]];
                    }
                }
                out[[ch, or, oc]] = acc * inv;
            }
        }
    }
    out
}

pub fn avgpool_backward(
    input_shape: (usize, usize, usize),
    factor: usize,
    dout: &Array3<f64>,
) -> Array3<f64> {
    let inv = 1.0 / (factor * factor) as f64;
    let (c, _, _) = input_shape;
    let (_, oh, ow) = dout.dim();
    let mut dinput = Array3::<f64>::zeros(input_shape);
    for ch in 0..c {
        for or in 0..oh {
            for oc in 0..ow {
                let g = dout[[ch, or, oc]] * inv;
                for dr in 0..factor {
                    for dc in 0..factor {
                        dinput[[ch, or * factor + dr, oc * factor + dc]] += g;
                    }
                }
            }
        }
    }
    dinput
}

pub fn dense_forward(x: ArrayView1<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    w.dot(&x) + b
}

/// Returns (dx, dw, db) for y = Wx + b with upstream gradient dy.
pub fn dense_backward(
    x: ArrayView1<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView1<f64>,
) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
    let dx = w.t().dot(&dy);
    let dw = dy
        .insert_axis(ndarray::Axis(1))
        .dot(&x.insert_axis(ndarray::Axis(0)));
    (dx, dw, dy.to_owned())
}

/// Negative-side slope of the leaky rectifier. A small leak keeps gradient
/// flowing through units pushed negative by the alignment losses, which
/// otherwise die and freeze the feature extractor.
pub const LEAK: f64 = 0.01;

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAK * x
    }
}

pub fn leaky_relu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAK
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn conv_matches_hand_computation() {
        // 1 channel, 3x3 input, 2x2 kernel, stride 1.
        let input = Array3::from_shape_vec((1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let w = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let b = array![0.5];
        let out = conv2d_forward(&input, &w, &b, 1);
        // Each output = top-left - bottom-right + 0.5 = -4 + 0.5.
        for &v in out.iter() {
            assert_relative_eq!(v, -3.5);
        }
    }

    #[test]
    fn conv_stride_two_output_size() {
        let input = Array3::<f64>::zeros((1, 64, 64));
        let w = Array4::<f64>::zeros((8, 1, 5, 5));
        let b = Array1::<f64>::zeros(8);
        let out = conv2d_forward(&input, &w, &b, 2);
        assert_eq!(out.dim(), (8, 30, 30));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = crate::seed::rng_for(1, "convfd", 0);
        use rand::Rng;
        let input =
            Array3::from_shape_fn((2, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let mut w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let dout = Array3::from_shape_fn((3, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let loss = |input: &Array3<f64>, w: &Array4<f64>| {
            (conv2d_forward(input, w, &b, 2) * &dout).sum()
        };
        let (dinput, dw, db) = conv2d_backward(&input, &w, 2, &dout);

        let eps = 1e-6;
        let mut inp = input.clone();
        for i in [[0usize, 0, 0], [1, 5, 5], [0, 3, 2]] {
            let orig = inp[i];
            inp[i] = orig + eps;
            let up = loss(&inp, &w);
            inp[i] = orig - eps;
            let down = loss(&inp, &w);
            inp[i] = orig;
            assert_relative_eq!((up - down) / (2.0 * eps), dinput[i], epsilon = 1e-6);
        }
        for i in [[0usize, 0, 0, 0], [2, 1, 2, 2]] {
            let orig = w[i];
            w[i] = orig + eps;
            let up = loss(&input, &w);
            w[i] = orig - eps;
            let down = loss(&input, &w);
            w[i] = orig;
            assert_relative_eq!((up - down) / (2.0 * eps), dw[i], epsilon = 1e-6);
        }
        assert_relative_eq!(db[0], dout.index_axis(ndarray::Axis(0), 0).sum(), epsilon = 1e-12);
    }

    #[test]
    fn maxpool_routes_to_argmax_and_breaks_ties_first() {
        let input = Array3::from_shape_vec(
            (1, 2, 4),
            vec![1.0, 1.0, 5.0, 2.0, 1.0, 1.0, 2.0, 5.0],
        )
        .unwrap();
        let (out, idx) = maxpool2_forward(&input);
        assert_eq!(out.as_slice().unwrap(), &[1.0, 5.0]);
        // All four elements of the first window tie at 1.0: first index wins.
        assert_eq!(idx[0], 0);
        let dout = Array3::from_shape_vec((1, 1, 2), vec![10.0, 20.0]).unwrap();
        let dinput = maxpool2_backward((1, 2, 4), &idx, &dout);
        assert_eq!(
            dinput.as_slice().unwrap(),
            &[10.0, 0.0, 20.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn dense_weight_gradient_is_outer_product() {
        let x = array![1.0, 2.0, 3.0];
        let w = array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]];
        let dy = array![10.0, -1.0];
        let (dx, dw, db) = dense_backward(x.view(), w.view(), dy.view());
        assert_eq!(dw, array![[10.0, 20.0, 30.0], [-1.0, -2.0, -3.0]]);
        assert_eq!(db, dy);
        assert_relative_eq!(dx[0], 0.1 * 10.0 + 0.4 * -1.0, epsilon = 1e-12);
    }

    #[test]
    fn avgpool_inverts_constant_fields() {
        let input = Array3::from_elem((2, 4, 4), 3.0);
        let out = avgpool_forward(&input, 2);
        assert_eq!(out, Array3::from_elem((2, 2, 2), 3.0));
        let dout = Array3::from_elem((2, 2, 2), 4.0);
        let dinput = avgpool_backward((2, 4, 4), 2, &dout);
        assert_eq!(dinput, Array3::from_elem((2, 4, 4), 1.0));
    }
}
