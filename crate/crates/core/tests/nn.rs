use proptest::prelude::*;
use robustfl_core::nn::{self, Activation, LayerSpec, NetworkSpec, ParamRole, ParamVector};
use robustfl_core::tensor::Tensor;

/// Direct same-padded convolution over a channels-last grid, written
/// independently of the library's kernel.
fn reference_forward(spec: &NetworkSpec, params: &ParamVector, input: &[f64], h: usize, w: usize, c0: usize) -> Vec<f64> {
    let mut x = input.to_vec();
    let mut cin = c0;
    for (li, l) in spec.layers.iter().enumerate() {
        let k = params.block(li, ParamRole::Kernel);
        let b = params.block(li, ParamRole::Bias);
        let cout = l.filters;
        let (ph, pw) = ((l.kernel_height - 1) / 2, (l.kernel_width - 1) / 2);
        let mut y = vec![0.0; h * w * cout];
        for r in 0..h {
            for c in 0..w {
                for co in 0..cout {
                    let mut z = b[co];
                    for dy in 0..l.kernel_height {
                        for dx in 0..l.kernel_width {
                            let rr = r as isize + dy as isize - ph as isize;
                            let cc = c as isize + dx as isize - pw as isize;
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let kv = k[((dy * l.kernel_width + dx) * cin + ci) * cout + co];
                                z += kv * x[((rr as usize) * w + cc as usize) * cin + ci];
                            }
                        }
                    }
                    y[(r * w + c) * cout + co] = l.activation.apply(z);
                }
            }
        }
        x = y;
        cin = cout;
    }
    x
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Selu), Just(Activation::Softplus), Just(Activation::Linear)]
}

fn small_net() -> impl Strategy<Value = (NetworkSpec, u64, Vec<f64>)> {
    (
        prop::collection::vec((1usize..5, 1usize..5, 1usize..4, activation()), 1..3),
        activation(),
        2usize..7,
        2usize..6,
        any::<u64>(),
    )
        .prop_flat_map(|(hidden, last, h, w, seed)| {
            let mut layers: Vec<LayerSpec> = hidden.into_iter().map(|(kh, kw, f, a)| LayerSpec::new(kh, kw, f, a)).collect();
            layers.push(LayerSpec::new(3, 2, 2, last));
            let spec = NetworkSpec::new(layers, h, w, 2).unwrap();
            let n = h * w * 2;
            (Just(spec), Just(seed), prop::collection::vec(-1.0f64..1.0, n))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_direct_convolution((spec, seed, input) in small_net()) {
        let params = nn::init_params(&spec, seed);
        let (h, w) = (spec.input_dims()[0], spec.input_dims()[1]);
        let x = Tensor::from_vec(&spec.input_dims(), input.clone()).unwrap();
        let got = nn::forward(&spec, &params, &x).unwrap();
        let want = reference_forward(&spec, &params, &input, h, w, 2);
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn gradient_matches_central_differences((spec, seed, input) in small_net(), target_shift in -1.0f64..1.0) {
        let params = nn::init_params(&spec, seed);
        let x = Tensor::from_vec(&spec.input_dims(), input).unwrap();
        let out = nn::forward(&spec, &params, &x).unwrap();
        let target = out.map(|v| v + target_shift * 0.3 + 0.1);
        let batch = vec![(x, target)];
        let grad = nn::backward(&spec, &params, &batch).unwrap();
        let loss = |p: &ParamVector| nn::per_sample_mse(&spec, p, &batch).unwrap()[0];
        let h = 1e-6;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.data_mut()[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = grad.data()[i];
            prop_assert!((a - numeric).abs() <= 1e-6 + 1e-4 * a.abs().max(numeric.abs()), "coord {}: {} vs {}", i, a, numeric);
        }
    }
}
