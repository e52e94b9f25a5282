//! Shared oracles for the integration suites. Not every binary uses
//! every helper.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use wavc::net::{GridCase, Network};
use wavc::sim::Simulator;

pub fn fixture(name: &str) -> String {
    format!("{}/../../cases/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

pub fn scenario_path(name: &str) -> String {
    format!("{}/../../scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

pub fn load_network(name: &str) -> Network {
    Network::new(GridCase::load(fixture(name)).expect("fixture parses")).expect("valid case")
}

/// Analytic drift and diffusion of a case at its solved operating point:
/// the scaled effective Jacobian and the per-channel noise intensities.
pub fn analytic_system(sim: &Simulator) -> (DMatrix<f64>, DMatrix<f64>) {
    let state = sim.initial_state().expect("equilibrium");
    let (theta, v) = sim.full_profile(&state);
    let j = wavc::net::effective_load_jacobian(&sim.net, &theta, &v)
        .expect("jacobian")
        .assemble();
    let m = sim.n_loads();
    let mut a = j;
    let mut h = DMatrix::zeros(2 * m, 2 * m);
    for (k, &pos) in sim.net.index.load_pos.iter().enumerate() {
        let load = sim.net.case.buses[pos].load.as_ref().unwrap();
        for c in 0..2 * m {
            a[(k, c)] /= load.tau_theta;
            a[(m + k, c)] /= load.tau_v;
        }
        h[(k, k)] = load.ps * load.sigma_p / load.tau_theta;
        h[(m + k, m + k)] = load.qs * load.sigma_q / load.tau_v;
    }
    (a, h)
}

/// Exact discrete sampling of `dx = A x dt + H dW`, independent of the
/// Euler-Maruyama integrator.
pub fn simulate_exact_ou(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    dt: f64,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> DMatrix<f64> {
    let dim = a.nrows();
    let (phi, qd) = wavc::linalg::discretize_lti(a, &(h * h.transpose()), dt);
    let chol = (qd + DMatrix::identity(dim, dim) * 1e-18)
        .cholesky()
        .expect("discrete covariance factorises")
        .l();
    let mut x = DVector::zeros(dim);
    let burn = 2000;
    let mut out = DMatrix::zeros(dim, n);
    for step in 0..(n + burn) {
        let noise = DVector::from_fn(dim, |_, _| rng.sample(StandardNormal));
        x = &phi * x + &chol * noise;
        if step >= burn {
            out.set_column(step - burn, &x);
        }
    }
    out
}

/// Wraps a stacked-state matrix into a measurement window.
pub fn window_from_states(f: &DMatrix<f64>, rate: f64, ids: &[wavc::net::BusId]) -> wavc::sim::PmuWindow {
    let m = f.nrows() / 2;
    let n = f.ncols();
    let mut theta = DMatrix::zeros(n, m);
    let mut v = DMatrix::zeros(n, m);
    for i in 0..n {
        for k in 0..m {
            theta[(i, k)] = f[(k, i)];
            v[(i, k)] = f[(m + k, i)];
        }
    }
    wavc::sim::PmuWindow {
        sample_rate: rate,
        t0: 0.0,
        bus_ids: ids.to_vec(),
        theta,
        v,
        p: None,
        q: None,
    }
}

pub fn report_line(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {id:02} {name}: {verdict} ({detail})");
}
