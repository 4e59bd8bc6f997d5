mod common;

use std::rc::Rc;

use camoforge::diffmath::{Conv2dParams, Layout, Tape, Tensor};
use common::{gradcheck, random_tensor, weighted_sum};

const TOL: f64 = 1e-3;
const STEP: f64 = 1e-5;

fn check<F>(name: &str, shape: &[usize], lo: f64, hi: f64, f: F)
where
    F: Fn(&mut Tape, camoforge::diffmath::Var) -> Result<camoforge::diffmath::Var, camoforge::diffmath::TensorError>,
{
    for seed in 0..10u64 {
        let x = random_tensor(shape, lo, hi, 100 + seed);
        let err = gradcheck(&x, 3, STEP, 1e-6, seed, &f);
        assert!(err <= TOL, "{name}: relative error {err:e} at seed {seed}");
    }
}

#[test]
fn elementwise_arithmetic() {
    check("add", &[6], -1.0, 1.0, |t, x| {
        let c = t.constant(random_tensor(&[6], -1.0, 1.0, 9))?;
        let y = t.add(x, c)?;
        let z = t.mul(y, y)?;
        t.sum(z)
    });
    check("sub", &[6], -1.0, 1.0, |t, x| {
        let s = t.scale(x, 0.3)?;
        let y = t.sub(s, x)?;
        let z = t.mul(y, x)?;
        weighted_sum(t, z, 1)
    });
    check("mul", &[5], -2.0, 2.0, |t, x| {
        let y = t.mul(x, x)?;
        let z = t.mul(y, x)?;
        weighted_sum(t, z, 2)
    });
    check("exp_ln", &[5], 0.2, 2.0, |t, x| {
        let l = t.ln(x)?;
        let m = t.mul(l, x)?;
        let e = t.exp(m)?;
        weighted_sum(t, e, 3)
    });
    check("mul_const_add_const", &[7], -1.0, 1.0, |t, x| {
        let f = Rc::new(random_tensor(&[7], -2.0, 2.0, 4).into_data());
        let y = t.mul_const(x, f)?;
        let y = t.add_const(y, &[0.5; 7])?;
        let z = t.mul(y, y)?;
        t.mean(z)
    });
}

#[test]
fn matmul() {
    check("matmul_left", &[3, 4], -1.0, 1.0, |t, x| {
        let b = t.constant(random_tensor(&[4, 2], -1.0, 1.0, 5))?;
        let y = t.matmul(x, b)?;
        let z = t.mul(y, y)?;
        t.sum(z)
    });
    check("matmul_right", &[4, 2], -1.0, 1.0, |t, x| {
        let a = t.constant(random_tensor(&[3, 4], -1.0, 1.0, 6))?;
        let y = t.matmul(a, x)?;
        let z = t.mul(y, y)?;
        t.sum(z)
    });
}

#[test]
fn conv2d_all_inputs() {
    let p = Conv2dParams { stride: 2, pad: 1, dilation: 1 };
    check("conv2d_input", &[2, 9, 8], -1.0, 1.0, move |t, x| {
        let w = t.constant(random_tensor(&[3, 2, 3, 3], -0.5, 0.5, 7))?;
        let b = t.constant(random_tensor(&[3], -0.1, 0.1, 8))?;
        let y = t.conv2d(x, w, Some(b), p)?;
        let z = t.mul(y, y)?;
        weighted_sum(t, z, 9)
    });
    let p2 = Conv2dParams { stride: 1, pad: 2, dilation: 2 };
    check("conv2d_weight", &[3, 2, 3, 3], -0.5, 0.5, move |t, w| {
        let x = t.constant(random_tensor(&[2, 7, 7], -1.0, 1.0, 10))?;
        let y = t.conv2d(x, w, None, p2)?;
        let z = t.mul(y, y)?;
        weighted_sum(t, z, 11)
    });
    check("conv2d_bias", &[3], -0.5, 0.5, move |t, b| {
        let x = t.constant(random_tensor(&[2, 6, 6], -1.0, 1.0, 12))?;
        let w = t.constant(random_tensor(&[3, 2, 3, 3], -0.5, 0.5, 13))?;
        let y = t.conv2d(x, w, Some(b), p)?;
        let z = t.mul(y, y)?;
        weighted_sum(t, z, 14)
    });
}

#[test]
fn pooling_and_upsampling() {
    check("avg_pool", &[2, 8, 8], -1.0, 1.0, |t, x| {
        let y = t.avg_pool(x, 4)?;
        let z = t.mul(y, y)?;
        weighted_sum(t, z, 15)
    });
    check("upsample_chw", &[2, 3, 3], -1.0, 1.0, |t, x| {
        let y = t.upsample_nearest(x, 3, Layout::Chw)?;
        let z = t.mul(y, y)?;
        weighted_sum(t, z, 16)
    });
    check("upsample_hwc", &[3, 3, 3], -1.0, 1.0, |t, x| {
        let y = t.upsample_nearest(x, 2, Layout::Hwc)?;
        let z = t.mul(y, y)?;
        weighted_sum(t, z, 17)
    });
}

#[test]
fn nonlinearities() {
    check("sigmoid", &[8], -4.0, 4.0, |t, x| {
        let y = t.sigmoid(x)?;
        t.sum(y)
    });
    check("relu", &[8], -1.0, 1.0, |t, x| {
        let y = t.relu(x)?;
        let z = t.mul(y, y)?;
        weighted_sum(t, z, 18)
    });
    check("clamp", &[8], -0.5, 1.5, |t, x| {
        let y = t.clamp(x, 0.0, 1.0)?;
        let z = t.mul(y, x)?;
        weighted_sum(t, z, 19)
    });
}

#[test]
fn softlike_rows() {
    for tau in [1.0, 0.5, 0.3] {
        check("softlike", &[4, 5], 0.05, 1.0, move |t, x| {
            let y = t.softlike(x, tau)?;
            let y = t.softlike(y, tau)?;
            weighted_sum(t, y, 20)
        });
    }
}

#[test]
fn bilinear_sampling() {
    let coords = Rc::new(vec![(0.1, 0.2), (0.97, 0.5), (0.5, 0.999), (0.33, 0.01), (-0.2, 1.4)]);
    check("bilinear", &[6, 5], -1.0, 1.0, move |t, g| {
        let y = t.bilinear_sample(g, coords.clone())?;
        let z = t.mul(y, y)?;
        weighted_sum(t, z, 21)
    });
}

#[test]
fn gaussian_blur() {
    check("blur", &[2, 12, 10], -1.0, 1.0, |t, x| {
        let y = t.gaussian_blur(x, 1.3)?;
        let z = t.mul(y, y)?;
        weighted_sum(t, z, 22)
    });
}

#[test]
fn reductions_and_broadcast() {
    check("broadcast", &[4], -1.0, 1.0, |t, x| {
        let y = t.broadcast_cols(x, 3)?;
        let z = t.mul(y, y)?;
        weighted_sum(t, z, 23)
    });
    check("reshape_mean", &[2, 6], -1.0, 1.0, |t, x| {
        let y = t.reshape(x, &[3, 4])?;
        let z = t.mul(y, y)?;
        t.mean(z)
    });
}

#[test]
fn sum_of_sigmoid_matches_central_difference() {
    // step 1e-4, relative error <= 1e-4
    for seed in 0..10 {
        let x = random_tensor(&[16], -3.0, 3.0, seed);
        let err = gradcheck(&x, 8, 1e-4, 1e-8, seed, |t, v| {
            let s = t.sigmoid(v)?;
            t.sum(s)
        });
        assert!(err <= 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn softlike_gradient_tight() {
    for seed in 0..10 {
        let x = random_tensor(&[1, 6], 0.05, 1.0, seed + 50);
        let err = gradcheck(&x, 6, 1e-5, 1e-8, seed, |t, v| {
            let s = t.softlike(v, 0.3)?;
            weighted_sum(t, s, seed)
        });
        assert!(err <= 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn shape_errors_surface() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.leaf(Tensor::zeros(&[3, 2])).unwrap();
    assert!(t.add(a, b).is_err());
    assert!(t.matmul(a, a).is_err());
    assert!(t.matmul(a, b).is_ok());
    let img = t.leaf(Tensor::zeros(&[1, 6, 6])).unwrap();
    assert!(t.avg_pool(img, 4).is_err());
    assert!(t.softlike(a, 0.0).is_err());
}

#[test]
fn displacement_through_latent() {
    use camoforge::meshgeom::{build_topology_map, displace_on_tape, generate_vehicle_mesh, VehicleTemplate};
    let mesh = generate_vehicle_mesh(7, VehicleTemplate::Sedan);
    let topo = build_topology_map(&mesh).unwrap();
    for seed in 0..10u64 {
        let x = random_tensor(&[64, 64, 1], -3.0, 3.0, 300 + seed);
        let err = gradcheck(&x, 3, STEP, 1e-6, seed, |t, v| {
            let pos = displace_on_tape(t, &mesh, &topo, v, 0.3).map_err(|e| {
                camoforge::diffmath::TensorError::Contract(e.to_string())
            })?;
            let z = t.mul(pos, pos)?;
            weighted_sum(t, z, 24)
        });
        assert!(err <= TOL, "seed {seed}: {err:e}");
    }
}
