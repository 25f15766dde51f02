use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::optim::Preset;

use super::config::RunConfig;
use super::run::{epochs_csv, EpochLog, PreparedSet, Trainer};

/// Epoch ceiling applied to every preset in CI mode.
pub const CI_EPOCH_CAP: usize = 20;

pub const SWEEP_HEADER: [&str; 8] = [
    "optimizer",
    "params",
    "epochs",
    "lr",
    "train_loss",
    "train_dsc",
    "val_loss",
    "val_dsc",
];

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub ci: bool,
    /// Per-run `epochs.csv` files go to `<out_dir>/runs/`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub preset: Preset,
    pub epochs_run: usize,
    /// Final-epoch metrics, or the error that ended the run.
    pub outcome: std::result::Result<EpochLog, String>,
}

impl SweepRow {
    pub fn note(&self) -> Option<String> {
        let mut notes = Vec::new();
        if let Err(e) = &self.outcome {
            notes.push(format!("failed: {e}"));
        }
        if self.epochs_run < self.preset.epochs && self.outcome.is_ok() {
            notes.push(format!("ran {} of {} epochs (CI cap)", self.epochs_run, self.preset.epochs));
        }
        if self.preset.lr_text.parse::<f64>().is_err() {
            notes.push(format!("lr `{}` read as {}", self.preset.lr_text, self.preset.lr()));
        }
        (!notes.is_empty()).then(|| notes.join("; "))
    }

    fn val_dsc(&self) -> Option<f64> {
        self.outcome.as_ref().ok().and_then(|l| l.val_dsc)
    }
}

/// Trains every preset from the same seed and data; failures become rows.
pub fn sweep(
    base: &RunConfig,
    presets: &[Preset],
    train: &PreparedSet,
    val: Option<&PreparedSet>,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if presets.is_empty() {
        return Err(Error::validation("sweep needs at least one preset"));
    }
    let mut rows = Vec::with_capacity(presets.len());
    for (i, preset) in presets.iter().enumerate() {
        let epochs = if opts.ci {
            preset.epochs.min(CI_EPOCH_CAP)
        } else {
            preset.epochs
        };
        let cfg = RunConfig {
            optimizer: preset.spec.clone(),
            optimizer_params: preset.params.clone(),
            epochs,
            ..base.clone()
        };
        log::info!("sweep {}/{}: {} lr {} for {epochs} epochs", i + 1, presets.len(), preset.optimizer, preset.lr_text);
        let mut history = Vec::new();
        let outcome = Trainer::new(cfg, train.clone(), val.cloned()).and_then(|mut t| {
            let r = t.run(None);
            history = t.history().to_vec();
            r
        });
        if let Some(dir) = &opts.out_dir {
            let run_dir = dir.join("runs").join(format!("{:02}-{}", i + 1, preset.optimizer.to_lowercase()));
            std::fs::create_dir_all(&run_dir)?;
            std::fs::write(run_dir.join("epochs.csv"), epochs_csv(&history))?;
        }
        rows.push(SweepRow {
            preset: preset.clone(),
            epochs_run: history.len(),
            outcome: outcome
                .map(|s| s.last.expect("at least one epoch"))
                .map_err(|e| e.to_string()),
        });
    }
    Ok(rows)
}

/// Results table. A trailing `note` column appears only when some row
/// carries a note (CI cap, failure, or a reinterpreted lr).
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let with_note = rows.iter().any(|r| r.note().is_some());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header: Vec<&str> = SWEEP_HEADER.to_vec();
    if with_note {
        header.push("note");
    }
    w.write_record(&header)?;
    let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for r in rows {
        let log = r.outcome.as_ref().ok();
        let mut rec = vec![
            r.preset.optimizer.clone(),
            r.preset.params.clone(),
            r.preset.epochs.to_string(),
            r.preset.lr_text.clone(),
            f(log.map(|l| l.train_loss)),
            f(log.map(|l| l.train_dsc)),
            f(log.and_then(|l| l.val_loss)),
            f(log.and_then(|l| l.val_dsc)),
        ];
        if with_note {
            rec.push(r.note().unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Rows ordered by validation macro-DSC, best first; rows without one go last.
pub fn ranked_summary(rows: &[SweepRow]) -> String {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (rows[a].val_dsc(), rows[b].val_dsc());
        match (x, y) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then(a.cmp(&b))
    });
    let mut s = String::from("rank  optimizer  epochs  lr      val_dsc  train_dsc\n");
    for (rank, &i) in order.iter().enumerate() {
        let r = &rows[i];
        let (v, t) = match &r.outcome {
            Ok(l) => (
                l.val_dsc.map_or("n/a".into(), |d| format!("{d:.4}")),
                format!("{:.4}", l.train_dsc),
            ),
            Err(_) => ("failed".to_string(), "-".to_string()),
        };
        let _ = writeln!(
            s,
            "{:>4}  {:<9}  {:>6}  {:<6}  {:>7}  {:>9}",
            rank + 1,
            r.preset.optimizer,
            r.preset.epochs,
            r.preset.lr_text,
            v,
            t
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::model::StagePlan;
    use crate::optim::table3_presets;
    use crate::trainer::config::{PlanSource, SplitPolicy};
    use crate::trainer::run::load_sets;

    #[test]
    fn failures_are_rows_and_order_only_permutes() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(dir.path(), 2, 48, 2).unwrap();
        let base = RunConfig {
            plan: PlanSource::B0 { resolution: 32 },
            batch_size: 5,
            split: SplitPolicy::Stratified { val_fraction: 0.5 },
            ..RunConfig::default()
        };
        let (train, val) = load_sets(&base, &m, &StagePlan::b0_at_resolution(32)).unwrap();
        let mut presets: Vec<Preset> = table3_presets().into_iter().take(3).collect();
        for p in &mut presets {
            p.epochs = 1;
        }
        let mut broken = presets[0].clone();
        broken.spec.lr = -1.0;
        presets.push(broken);

        let opts = SweepOptions::default();
        let rows = sweep(&base, &presets, &train, val.as_ref(), &opts).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[3].outcome.is_err());
        assert!(rows[3].note().unwrap().starts_with("failed"));
        let csv = sweep_csv(&rows).unwrap();
        assert!(csv.starts_with("optimizer,params,epochs,lr,train_loss,train_dsc,val_loss,val_dsc"));
        assert_eq!(csv.lines().count(), 5);

        let reversed: Vec<Preset> = presets.iter().rev().cloned().collect();
        let rows_rev = sweep(&base, &reversed, &train, val.as_ref(), &opts).unwrap();
        let mut again: Vec<SweepRow> = rows_rev.into_iter().rev().collect();
        for (a, b) in again.iter_mut().zip(&rows) {
            assert_eq!(a, b);
        }
        assert!(ranked_summary(&rows).lines().last().unwrap().contains("failed"));
    }

    #[test]
    fn clean_rows_have_no_note_column() {
        let mut p = table3_presets()[0].clone();
        p.lr_text = "0.002".into();
        let row = SweepRow {
            epochs_run: p.epochs,
            preset: p,
            outcome: Ok(EpochLog {
                epoch: 1,
                running_loss: 1.0,
                train_loss: 1.0,
                train_accuracy: 0.5,
                train_dsc: 0.5,
                val_loss: None,
                val_accuracy: None,
                val_dsc: None,
            }),
        };
        let csv = sweep_csv(&[row]).unwrap();
        assert_eq!(csv.lines().next().unwrap(), SWEEP_HEADER.join(","));
    }
}
