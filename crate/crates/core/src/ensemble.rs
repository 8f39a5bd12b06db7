//! Map phase: training the expert collection for a scheme and evaluating
//! every expert at the test inputs.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::{self, ExpertPrediction, GpModel};
use crate::kernel::{HyperParams, KernelSpec};
use crate::optimize::{optimize_hypers, OptConfig};
use crate::partition::{self, Scheme, SchemeConfig};
use crate::seeding::{derive_seed, stream_rng};

#[derive(Clone, Debug)]
pub struct ExpertEnsemble {
    pub experts: Vec<GpModel>,
    pub scheme_config: SchemeConfig,
    pub shared_hypers: bool,
    /// Training-row indices used by each expert.
    pub subsets: Vec<Vec<usize>>,
    /// Experts whose optimization failed and were refitted from defaults.
    pub fallbacks: Vec<usize>,
}

impl ExpertEnsemble {
    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }
}

fn default_for(spec: &KernelSpec, x: &DMatrix<f64>, y: &DVector<f64>, data: &Dataset) -> HyperParams {
    if x.nrows() >= 2 {
        gp::default_hypers(spec, x, y)
    } else {
        gp::default_hypers(spec, &data.x, &data.y)
    }
}

/// Optimizes from the data-scaled default; on failure returns the default
/// itself with `false`.
fn learn_hypers(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    data: &Dataset,
    opt: &OptConfig,
) -> (HyperParams, bool) {
    let init = default_for(spec, x, y, data);
    if x.nrows() < 2 {
        return (init, true);
    }
    match optimize_hypers(x, y, spec, &init, opt) {
        Ok(p) => (p, true),
        Err(_) => (init, false),
    }
}

fn subsets_for(data: &Dataset, cfg: &SchemeConfig) -> Result<Vec<Vec<usize>>> {
    let n = data.len();
    let seed = cfg.seed;
    match cfg.scheme {
        Scheme::Ds => Ok(partition::partition_disjoint(n, cfg.subset_size, seed)),
        Scheme::SodSharedHyp | Scheme::Sod => {
            partition::sample_subsets(n, cfg.n_experts, cfg.subset_size, seed)
        }
        Scheme::Tree | Scheme::TreeRandKern => {
            let tree = partition::build_ball_tree(&data.x, 2 * cfg.subset_size, seed)?;
            Ok(partition::tree_expert_subsets(&tree, cfg.n_experts, cfg.subset_size, seed))
        }
    }
}

/// Trains one GP per subset according to `cfg.scheme`.
///
/// Shared-hyperparameter schemes optimize once on a separate random subset of
/// `subset_size` points. Otherwise each expert is optimized independently with
/// its own seed derived from `(cfg.seed, expert index)`, so the result does not
/// depend on how rayon schedules the work.
pub fn train_ensemble(
    data: &Dataset,
    cfg: &SchemeConfig,
    kernel_default: &KernelSpec,
    opt: &OptConfig,
) -> Result<ExpertEnsemble> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("cannot train an ensemble on an empty dataset"));
    }
    if kernel_default.input_dim() != data.dim() {
        return Err(Error::input(format!(
            "kernel is over {} inputs but the data has {}",
            kernel_default.input_dim(),
            data.dim()
        )));
    }
    if cfg.scheme != Scheme::Ds && data.len() < cfg.subset_size {
        return Err(Error::input(format!(
            "scheme {} needs at least {} points, got {}",
            cfg.scheme,
            cfg.subset_size,
            data.len()
        )));
    }

    let subsets = subsets_for(data, cfg)?;
    let specs: Vec<KernelSpec> = match cfg.scheme {
        Scheme::TreeRandKern => {
            partition::assign_random_kernels(subsets.len(), data.dim(), cfg.seed)?
        }
        _ => vec![kernel_default.clone(); subsets.len()],
    };

    let shared = cfg.scheme.shares_hypers();
    let shared_params = if shared {
        let size = cfg.subset_size.min(data.len());
        let rows = rand::seq::index::sample(&mut stream_rng(cfg.seed, 5), data.len(), size).into_vec();
        let (x, y) = data.subset(&rows);
        let opt = OptConfig {
            seed: derive_seed(cfg.seed, u64::MAX),
            ..opt.clone()
        };
        Some(learn_hypers(kernel_default, &x, &y, data, &opt).0)
    } else {
        None
    };

    let fitted: Vec<Result<(GpModel, bool)>> = subsets
        .par_iter()
        .zip(specs.par_iter())
        .enumerate()
        .map(|(i, (rows, spec))| {
            let (x, y) = data.subset(rows);
            let (params, ok) = match &shared_params {
                Some(p) => (p.clone(), true),
                None => {
                    let opt = OptConfig {
                        seed: derive_seed(cfg.seed, i as u64),
                        ..opt.clone()
                    };
                    learn_hypers(spec, &x, &y, data, &opt)
                }
            };
            match gp::fit(&x, &y, spec, &params) {
                Ok(m) => Ok((m, ok)),
                Err(first) => {
                    let fallback = default_for(spec, &x, &y, data);
                    gp::fit(&x, &y, spec, &fallback)
                        .map(|m| (m, false))
                        .map_err(|_| Error::numerical(format!("expert {i}: {first}")))
                }
            }
        })
        .collect();

    let mut experts = Vec::with_capacity(fitted.len());
    let mut fallbacks = Vec::new();
    for (i, r) in fitted.into_iter().enumerate() {
        let (m, ok) = r?;
        if !ok {
            fallbacks.push(i);
        }
        experts.push(m);
    }
    Ok(ExpertEnsemble {
        experts,
        scheme_config: cfg.clone(),
        shared_hypers: shared,
        subsets,
        fallbacks,
    })
}

/// `grid[j][i]` is expert `i`'s prediction at test row `j`.
pub fn expert_predictions(
    ensemble: &ExpertEnsemble,
    xstar: &DMatrix<f64>,
) -> Result<Vec<Vec<ExpertPrediction>>> {
    let per_expert: Vec<Vec<ExpertPrediction>> = ensemble
        .experts
        .par_iter()
        .map(|e| e.predict(xstar))
        .collect::<Result<_>>()?;
    let m = xstar.nrows();
    Ok((0..m)
        .map(|j| per_expert.iter().map(|col| col[j]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_gp_data;
    use crate::kernel::BaseKernel;

    fn toy(n: usize, seed: u64) -> Dataset {
        let spec = KernelSpec::new(BaseKernel::SeArd, 2).unwrap();
        let p = HyperParams::uniform(&spec, 1.0, 1.0, 0.05);
        synthetic_gp_data(n, 2, &spec, &p, false, seed).unwrap()
    }

    fn quick_opt() -> OptConfig {
        OptConfig { max_iters: 30, restarts: 0, ..Default::default() }
    }

    fn se() -> KernelSpec {
        KernelSpec::new(BaseKernel::SeArd, 2).unwrap()
    }

    #[test]
    fn ds_shares_hypers() {
        let data = toy(200, 1);
        let cfg = SchemeConfig { scheme: Scheme::Ds, subset_size: 100, n_experts: 128, seed: 3 };
        let ens = train_ensemble(&data, &cfg, &se(), &quick_opt()).unwrap();
        assert_eq!(ens.len(), 2);
        assert!(ens.shared_hypers);
        assert_eq!(ens.experts[0].params(), ens.experts[1].params());
        let cfg = SchemeConfig { subset_size: 64, ..cfg };
        let ens = train_ensemble(&data, &cfg, &se(), &quick_opt()).unwrap();
        assert_eq!(ens.len(), 4);
        assert_eq!(ens.experts[3].n(), 200 - 3 * 64);
    }

    #[test]
    fn sod_learns_independent_hypers() {
        let data = toy(300, 2);
        let cfg = SchemeConfig { scheme: Scheme::Sod, subset_size: 60, n_experts: 4, seed: 4 };
        let ens = train_ensemble(&data, &cfg, &se(), &quick_opt()).unwrap();
        assert_eq!(ens.len(), 4);
        assert!(!ens.shared_hypers);
        for a in 0..4 {
            for b in (a + 1)..4 {
                assert_ne!(ens.experts[a].params(), ens.experts[b].params());
            }
        }
    }

    #[test]
    fn shared_scheme_uses_identical_params() {
        let data = toy(300, 2);
        let cfg = SchemeConfig { scheme: Scheme::SodSharedHyp, subset_size: 60, n_experts: 5, seed: 4 };
        let ens = train_ensemble(&data, &cfg, &se(), &quick_opt()).unwrap();
        assert!(ens.experts.iter().all(|e| e.params() == ens.experts[0].params()));
        assert!(ens.experts.iter().all(|e| e.spec() == ens.experts[0].spec()));
    }

    #[test]
    fn tree_rand_kern_reproducible() {
        let data = toy(300, 5);
        let cfg = SchemeConfig { scheme: Scheme::TreeRandKern, subset_size: 40, n_experts: 9, seed: 6 };
        let a = train_ensemble(&data, &cfg, &se(), &quick_opt()).unwrap();
        let b = train_ensemble(&data, &cfg, &se(), &quick_opt()).unwrap();
        let names = |e: &ExpertEnsemble| e.experts.iter().map(|m| m.spec().name()).collect::<Vec<_>>();
        assert_eq!(names(&a), names(&b));
        assert_eq!(a.len(), 9);
        for (x, y) in a.experts.iter().zip(&b.experts) {
            assert_eq!(x.params(), y.params());
        }
    }

    #[test]
    fn too_little_data_rejected() {
        let data = toy(50, 1);
        let cfg = SchemeConfig { scheme: Scheme::Sod, subset_size: 60, n_experts: 2, seed: 0 };
        assert!(train_ensemble(&data, &cfg, &se(), &quick_opt()).is_err());
    }

    #[test]
    fn single_expert_grid_matches_predict() {
        let data = toy(120, 7);
        let cfg = SchemeConfig { scheme: Scheme::Sod, subset_size: 50, n_experts: 1, seed: 1 };
        let ens = train_ensemble(&data, &cfg, &se(), &quick_opt()).unwrap();
        let xs = toy(10, 8).x;
        let grid = expert_predictions(&ens, &xs).unwrap();
        let direct = ens.experts[0].predict(&xs).unwrap();
        assert_eq!(grid.len(), 10);
        for (row, d) in grid.iter().zip(&direct) {
            assert_eq!(row, &vec![*d]);
        }
    }

    #[test]
    fn far_points_revert_to_prior() {
        let data = toy(200, 9);
        let cfg = SchemeConfig { scheme: Scheme::Sod, subset_size: 50, n_experts: 3, seed: 2 };
        let ens = train_ensemble(&data, &cfg, &se(), &quick_opt()).unwrap();
        let far = DMatrix::from_element(2, 2, 1e4);
        for row in expert_predictions(&ens, &far).unwrap() {
            for p in row {
                assert!((p.variance - p.prior_variance).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn schedule_does_not_change_results() {
        let data = toy(200, 10);
        let cfg = SchemeConfig { scheme: Scheme::Tree, subset_size: 40, n_experts: 6, seed: 3 };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let ens = train_ensemble(&data, &cfg, &se(), &quick_opt()).unwrap();
                expert_predictions(&ens, &data.x).unwrap()
            })
        };
        assert_eq!(run(1), run(3));
    }
}
