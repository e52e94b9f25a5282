//! Bus admittance matrix assembly.

use super::{CaseIndex, GridCase, NetError};
use nalgebra::DMatrix;

/// Dense real admittance matrix split into conductance and susceptance,
/// rows and columns following `order`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub order: Vec<super::BusId>,
}

/// Standard assembly: branch (i, j) contributes -1/(r + jx) off-diagonal,
/// the diagonal accumulates the branch admittance plus half the line
/// charging at each end. Out-of-service branches contribute nothing and
/// parallel branches sum.
pub fn build_admittance(case: &GridCase, index: &CaseIndex) -> Result<AdmittanceMatrix, NetError> {
    let n = index.n_buses();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for branch in &case.branches {
        if !branch.in_service {
            continue;
        }
        if branch.r == 0.0 && branch.x == 0.0 {
            return Err(NetError::ZeroImpedance {
                from: branch.from,
                to: branch.to,
            });
        }
        let i = index.position(branch.from)?;
        let j = index.position(branch.to)?;
        let den = branch.r * branch.r + branch.x * branch.x;
        let gy = branch.r / den;
        let by = -branch.x / den;
        g[(i, j)] -= gy;
        g[(j, i)] -= gy;
        b[(i, j)] -= by;
        b[(j, i)] -= by;
        g[(i, i)] += gy;
        g[(j, j)] += gy;
        b[(i, i)] += by + branch.b_shunt / 2.0;
        b[(j, j)] += by + branch.b_shunt / 2.0;
    }
    Ok(AdmittanceMatrix {
        g,
        b,
        order: index.ids.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use approx::assert_relative_eq;

    fn two_bus_case(in_service: bool) -> GridCase {
        GridCase {
            base_mva: 100.0,
            solver: None,
            buses: vec![
                Bus {
                    id: BusId(1),
                    kind: BusKind::Generator,
                    v0: 1.0,
                    theta0: 0.0,
                    load: None,
                },
                Bus {
                    id: BusId(2),
                    kind: BusKind::DynamicLoad,
                    v0: 1.0,
                    theta0: 0.0,
                    load: Some(LoadParams {
                        tau_theta: 10.0,
                        tau_v: 10.0,
                        ps: 0.0,
                        qs: 0.0,
                        sigma_p: 0.0,
                        sigma_q: 0.0,
                    }),
                },
            ],
            branches: vec![Branch {
                from: BusId(1),
                to: BusId(2),
                r: 0.0,
                x: 0.1,
                b_shunt: 0.0,
                in_service,
            }],
            svcs: vec![],
            generators: vec![GeneratorSource {
                bus: BusId(1),
                v: 1.0,
                theta: 0.0,
            }],
        }
    }

    #[test]
    fn lossless_branch_assembles_susceptance_only() {
        let case = two_bus_case(true);
        let index = CaseIndex::new(&case);
        let y = build_admittance(&case, &index).unwrap();
        assert_relative_eq!(y.b[(0, 0)], -10.0);
        assert_relative_eq!(y.b[(0, 1)], 10.0);
        assert_relative_eq!(y.b[(1, 0)], 10.0);
        assert_relative_eq!(y.b[(1, 1)], -10.0);
        assert_eq!(y.g, nalgebra::DMatrix::zeros(2, 2));
    }

    #[test]
    fn out_of_service_branch_contributes_nothing() {
        let case = two_bus_case(false);
        let index = CaseIndex::new(&case);
        let y = build_admittance(&case, &index).unwrap();
        assert_eq!(y.g, nalgebra::DMatrix::zeros(2, 2));
        assert_eq!(y.b, nalgebra::DMatrix::zeros(2, 2));
    }

    #[test]
    fn zero_impedance_branch_rejected() {
        let mut case = two_bus_case(true);
        case.branches[0].x = 0.0;
        let index = CaseIndex::new(&case);
        assert!(matches!(
            build_admittance(&case, &index),
            Err(NetError::ZeroImpedance { .. })
        ));
    }

    #[test]
    fn trip_and_restore_is_bit_exact() {
        let mut case = two_bus_case(true);
        let index = CaseIndex::new(&case);
        let before = build_admittance(&case, &index).unwrap();
        case.trip_branch(BusId(2), BusId(1)).unwrap();
        let tripped = build_admittance(&case, &index).unwrap();
        assert_ne!(before, tripped);
        case.branches[0].in_service = true;
        let after = build_admittance(&case, &index).unwrap();
        assert_eq!(before, after);
    }
}
