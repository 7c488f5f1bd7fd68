use nalgebra::{DMatrix, DVector};
use sysid::autodiff::{Tape, Var};
use sysid::ekf::{Ekf, FnModel, LinearModel};
use sysid::mlp::{MlpNetwork, UniformStream};
use sysid::neural_ss::{NeuralStateSpaceModel, NssSpec};

#[test]
fn nis_is_consistent_on_a_matched_model() {
    let a = DMatrix::from_row_slice(2, 2, &[0.95, 0.1, -0.1, 0.9]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let d = DMatrix::zeros(1, 1);
    let (q, r) = (1e-2, 1e-1);
    let model = LinearModel::new(a.clone(), b.clone(), c.clone(), d).unwrap();
    let mut f = Ekf::new(model, DVector::zeros(2), DMatrix::identity(2, 2) * 1e-6, DMatrix::identity(2, 2) * q, DMatrix::identity(1, 1) * r).unwrap();
    let mut rng = UniformStream::new(5);
    let mut x = DVector::zeros(2);
    let n = 5000;
    let mut nis = Vec::with_capacity(n);
    for _ in 0..n {
        let u = [rng.symmetric(1.0)];
        x = &a * &x + &b * u[0] + DVector::from_fn(2, |_, _| q.sqrt() * rng.normal());
        let y = (&c * &x)[0] + r.sqrt() * rng.normal();
        f.predict(&u).unwrap();
        nis.push(f.correct(&[y], &u).unwrap().nis);
    }
    // chi-square with one degree of freedom: mean 1, variance 2
    let mean = nis.iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt() + 0.02, "mean NIS {mean}");
}

const DT: f64 = 0.05;

fn pendulum<'t>(t: &'t Tape, x: Var<'t>, _: &[f64]) -> sysid::Result<Var<'t>> {
    let th = x.slice(0, 1)?;
    let om = x.slice(1, 1)?;
    t.concat(&[th.add(om.scale(DT))?, om.sub(th.sin().scale(9.81 * DT))?])
}

fn angle<'t>(_: &'t Tape, x: Var<'t>, _: &[f64]) -> sysid::Result<Var<'t>> {
    x.slice(0, 1)
}

#[test]
fn function_model_tracks_pendulum() {
    let dt = DT;
    let model = FnModel::new(2, 0, 1, pendulum, angle);
    let mut ekf = Ekf::new(
        model,
        DVector::from_vec(vec![0.3, 0.0]),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * 1e-6,
        DMatrix::identity(1, 1) * 1e-4,
    )
    .unwrap();
    let (mut th, mut om) = (0.5f64, 0.0f64);
    let mut rng = UniformStream::new(2);
    for _ in 0..400 {
        let next = (th + om * dt, om - 9.81 * th.sin() * dt);
        th = next.0;
        om = next.1;
        ekf.predict(&[]).unwrap();
        ekf.correct(&[th + 1e-2 * rng.normal()], &[]).unwrap();
    }
    let s = ekf.state();
    assert!((s[0] - th).abs() < 0.02 && (s[1] - om).abs() < 0.1, "{s} vs ({th}, {om})");
}

#[test]
fn neural_model_with_affine_net_is_a_linear_filter() {
    let mut m = NeuralStateSpaceModel::new(&NssSpec { nx: 1, nu: 1, ny: 1, ts: 1.0, ..NssSpec::default() }).unwrap();
    m.set_state_net(MlpNetwork::affine(DMatrix::from_row_slice(1, 2, &[0.8, 0.5]), DVector::zeros(1)).unwrap()).unwrap();
    let lin = LinearModel::new(
        DMatrix::from_element(1, 1, 0.8),
        DMatrix::from_element(1, 1, 0.5),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::zeros(1, 1),
    )
    .unwrap();
    let p0 = DMatrix::identity(1, 1);
    let q = DMatrix::from_element(1, 1, 1e-3);
    let r = DMatrix::from_element(1, 1, 1e-2);
    let mut a = Ekf::new(m, DVector::zeros(1), p0.clone(), q.clone(), r.clone()).unwrap();
    let mut b = Ekf::new(lin, DVector::zeros(1), p0, q, r).unwrap();
    let mut rng = UniformStream::new(9);
    for _ in 0..50 {
        let u = [rng.symmetric(1.0)];
        let y = [rng.normal()];
        a.predict(&u).unwrap();
        b.predict(&u).unwrap();
        a.correct(&y, &u).unwrap();
        b.correct(&y, &u).unwrap();
        assert!((a.state() - b.state()).amax() < 1e-12);
        assert!((a.covariance() - b.covariance()).amax() < 1e-12);
    }
}
