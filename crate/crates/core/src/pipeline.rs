//! Train, plan and evaluate end to end. Shared by the command line and the
//! experiment tests.

use serde::{Deserialize, Serialize};

use crate::acmt::{self, AcmtModel, Direction};
use crate::config::Config;
use crate::error::Result;
use crate::eval::{self, BaselineModel, EvalReport, Methods};
use crate::io::CheckpointModel;
use crate::phantom::{self, build_dataset, PhantomCase, PhantomDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Face → bone transfer network.
    Bp,
    /// Bone → face transfer network.
    Fs,
    /// Face-blind bone deformation network.
    Baseline,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Bp, Role::Baseline, Role::Fs];

    pub fn name(self) -> &'static str {
        match self {
            Role::Bp => "bp",
            Role::Fs => "fs",
            Role::Baseline => "baseline",
        }
    }

    /// Initial weights seed, offset per role so the networks differ.
    pub fn model_seed(self, base: u64) -> u64 {
        let offset = match self {
            Role::Bp => 1,
            Role::Baseline => 2,
            Role::Fs => 3,
        };
        base.wrapping_add(offset)
    }
}

/// Untrained model for `role`. Output layers start at zero so the untrained
/// network predicts no movement.
pub fn init_model(role: Role, cfg: &Config) -> Result<CheckpointModel> {
    let seed = role.model_seed(cfg.model.seed);
    Ok(match role {
        Role::Bp => CheckpointModel::Acmt(AcmtModel::new(Direction::FaceToBone, cfg.model.acmt(), seed, true)?),
        Role::Fs => CheckpointModel::Acmt(AcmtModel::new(Direction::BoneToFace, cfg.model.acmt(), seed, true)?),
        Role::Baseline => CheckpointModel::Baseline(BaselineModel::new(&cfg.model.baseline(), seed, true)?),
    })
}

/// Trains a fresh `role` model on `cases`; returns it with its loss history.
pub fn train_role(
    role: Role,
    cfg: &Config,
    cases: &[PhantomCase],
    on_epoch: impl FnMut(usize, f64),
) -> Result<(CheckpointModel, Vec<f64>)> {
    let mut model = init_model(role, cfg)?;
    let ctx = cfg.model.cranium_context;
    let history = match (&mut model, role) {
        (CheckpointModel::Acmt(m), Role::Bp) => acmt::train(m, &phantom::bp_samples(cases, ctx)?, &cfg.train, on_epoch)?,
        (CheckpointModel::Acmt(m), _) => acmt::train(m, &phantom::fs_samples(cases, ctx)?, &cfg.train, on_epoch)?,
        (CheckpointModel::Baseline(m), _) => eval::train_baseline(m, cases, &cfg.train, on_epoch)?,
    };
    Ok((model, history))
}

/// `epoch,loss` with one row per epoch.
pub fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        s.push_str(&format!("{e},{l}\n"));
    }
    s
}

pub fn methods<'a>(
    cfg: &Config,
    bp: Option<&'a AcmtModel>,
    fs: Option<&'a AcmtModel>,
    baseline: Option<&'a BaselineModel>,
) -> Methods<'a> {
    Methods {
        baseline,
        bp: bp.map(|m| m as _),
        fs: fs.map(|m| m as _),
        search: cfg.search,
        include_identity: cfg.eval.include_identity,
        exact_max_n: cfg.eval.exact_max_n,
        distance: cfg.eval.distance,
    }
}

pub struct Experiment {
    pub dataset: PhantomDataset,
    pub bp: AcmtModel,
    pub fs: AcmtModel,
    pub baseline: BaselineModel,
    pub histories: Vec<(Role, Vec<f64>)>,
    pub report: EvalReport,
}

/// Generates an (augmented) phantom dataset, trains all three networks and
/// evaluates every method on the test cases.
pub fn run_experiment(
    cfg: &Config,
    n_train: usize,
    n_test: usize,
    seed: u64,
    mut on_epoch: impl FnMut(Role, usize, f64),
) -> Result<Experiment> {
    cfg.validate()?;
    let dataset = build_dataset(&cfg.phantom, n_train, n_test, true, seed)?;
    let mut bp = None;
    let mut fs = None;
    let mut baseline = None;
    let mut histories = Vec::new();
    for role in Role::ALL {
        let (model, history) = train_role(role, cfg, &dataset.train, |e, l| on_epoch(role, e, l))?;
        histories.push((role, history));
        match (role, model) {
            (Role::Bp, CheckpointModel::Acmt(m)) => bp = Some(m),
            (Role::Fs, CheckpointModel::Acmt(m)) => fs = Some(m),
            (Role::Baseline, CheckpointModel::Baseline(m)) => baseline = Some(m),
            _ => unreachable!("init_model builds the model kind of each role"),
        }
    }
    let (bp, fs, baseline) = (bp.expect("trained"), fs.expect("trained"), baseline.expect("trained"));
    let report = eval::evaluate(
        &methods(cfg, Some(&bp), Some(&fs), Some(&baseline)),
        &dataset.test,
        serde_json::to_value(cfg)?,
    )?;
    Ok(Experiment {
        dataset,
        bp,
        fs,
        baseline,
        histories,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        let mut cfg = Config::desk();
        cfg.train.epochs = 2;
        cfg.model.width_div = 16;
        cfg
    }

    #[test]
    fn zero_epochs_keep_the_initial_model() {
        let mut cfg = tiny();
        cfg.train.epochs = 0;
        let ds = build_dataset(&cfg.phantom, 2, 0, false, 3).unwrap();
        for role in Role::ALL {
            let (model, hist) = train_role(role, &cfg, &ds.train, |_, _| {}).unwrap();
            assert!(hist.is_empty());
            assert_eq!(model, init_model(role, &cfg).unwrap());
        }
    }

    #[test]
    fn roles_get_the_right_models() {
        let cfg = tiny();
        match init_model(Role::Fs, &cfg).unwrap() {
            CheckpointModel::Acmt(m) => assert_eq!(m.direction, Direction::BoneToFace),
            _ => panic!("fs must be a transfer model"),
        }
        match init_model(Role::Bp, &cfg).unwrap() {
            CheckpointModel::Acmt(m) => assert_eq!(m.direction, Direction::FaceToBone),
            _ => panic!("bp must be a transfer model"),
        }
        assert!(matches!(init_model(Role::Baseline, &cfg).unwrap(), CheckpointModel::Baseline(_)));
    }

    #[test]
    fn loss_csv_has_a_row_per_epoch() {
        let csv = loss_csv(&[3.0, 2.5, 0.125]);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().last(), Some("2,0.125"));
    }

    #[test]
    fn tiny_experiment_is_deterministic() {
        let cfg = tiny();
        let a = run_experiment(&cfg, 2, 2, 11, |_, _, _| {}).unwrap();
        let b = run_experiment(&cfg, 2, 2, 11, |_, _, _| {}).unwrap();
        assert_eq!(a.dataset.train.len(), 2 * (1 + cfg.phantom.augment_copies));
        assert_eq!(a.histories.len(), 3);
        assert!(a.histories.iter().all(|(_, h)| h.len() == 2));
        assert_eq!(a.report, b.report);
        assert_eq!(a.bp, b.bp);
    }
}
