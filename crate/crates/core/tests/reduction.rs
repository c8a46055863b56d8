use heatnet::fixtures;
use heatnet::model::FullOrderModel;
use heatnet::reduction::{
    collect_candidates, fom_transfer, greedy_reduce, local_basis, training_controls, QBasis, ReductionConfig,
};
use heatnet::scenario::ScenarioConfig;
use heatnet::thermal::Discretization;
use nalgebra::DMatrix;

fn two_loop(cells: usize) -> FullOrderModel<f64> {
    let net = fixtures::two_loop().into_topology().unwrap();
    FullOrderModel::from_scenario(&net, Discretization::uniform(&net, cells).unwrap(), &ScenarioConfig::default()).unwrap()
}

#[test]
fn greedy_history_is_monotone_and_last_enrichment_interpolates() {
    let cfg = ScenarioConfig::default();
    let m = two_loop(12);
    let grid = cfg.grid::<f64>().unwrap();
    let cands = collect_candidates(&m, &training_controls(&cfg), &grid, 12).unwrap();
    let rc = ReductionConfig::for_step(cfg.dt_s);
    let (rom, info) = greedy_reduce(&m, &cands, &rc).unwrap();

    for w in info.history.windows(2) {
        assert!(w[1].max_error <= w[0].max_error + 1e-12, "{:?}", info.history);
        assert!(w[1].dim > w[0].dim);
    }
    assert!(info.final_errors.iter().all(|&e| e < rc.tolerance));

    let last = &cands[*info.selected.last().unwrap()];
    let full = fom_transfer(&m, &last.gamma, &rc.shifts).unwrap();
    let red = rom.transfer(&rom.restrict_weights(&last.gamma), &rc.shifts).unwrap();
    for (f, r) in full.iter().zip(&red) {
        assert!((f - r).norm() <= 1e-8 * f.norm(), "{}", (f - r).norm() / f.norm());
    }
}

#[test]
fn basis_stays_orthonormal_under_nearly_dependent_blocks() {
    let m = two_loop(40);
    let cfg = ScenarioConfig::default();
    let grid = cfg.grid::<f64>().unwrap();
    let cands = collect_candidates(&m, &training_controls(&cfg), &grid, 24).unwrap();
    let shifts = ReductionConfig::for_step(cfg.dt_s).shifts;
    let mut b = QBasis::constant(m.volumes().clone());
    for c in cands.iter().take(12) {
        let block = local_basis(&m, &c.gamma, &shifts).unwrap();
        b.extend(&block, 1e-10);
        assert!(b.orthogonality_defect() < 1e-12, "{}", b.orthogonality_defect());
    }
    // Re-adding a block that is already spanned adds almost nothing.
    let before = b.dim();
    let block = local_basis(&m, &cands[0].gamma, &shifts).unwrap();
    let again = DMatrix::from_fn(block.nrows(), block.ncols(), |i, j| block[(i, j)] * (1.0 + 1e-15 * j as f64));
    assert!(b.extend(&again, 1e-8) == 0, "{} -> {}", before, b.dim());
    assert!(b.orthogonality_defect() < 1e-12);
}
