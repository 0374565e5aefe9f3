//! Training loop with periodic evaluation and checkpoints, and corpus evaluation through
//! streaming sessions.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::checkpoint_save;
use crate::corpus::{Dataset, Utterance};
use crate::error::{Error, Result};
use crate::metrics::TerCounter;
use crate::model::{init_model, universal_training_step, LossReport, ModelConfig, ModelParams};
use crate::numerics::OptimizerState;
use crate::scama::argmax;
use crate::streaming::{latency_of_chunk_size, stream_open};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Online,
    Offline,
    Both,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(EvalMode::Online),
            "offline" => Ok(EvalMode::Offline),
            "both" => Ok(EvalMode::Both),
            _ => Err(Error::config("mode", format!("expected online/offline/both, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub chunk_size: usize,
    pub utterances: usize,
    pub online: Option<TerCounter>,
    pub offline: Option<TerCounter>,
    /// Tokens emitted by the online pass.
    pub emitted_tokens: usize,
    /// Sum over chunks of the predictor's argmax count.
    pub predicted_tokens: usize,
}

impl EvalReport {
    pub fn online_ter(&self) -> Option<f64> {
        self.online.map(|c| c.ter())
    }

    pub fn offline_ter(&self) -> Option<f64> {
        self.offline.map(|c| c.ter())
    }
}

/// Streams every utterance through a session of the given chunk size.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    utterances: &[Utterance],
    chunk_size: usize,
    mode: EvalMode,
) -> Result<EvalReport> {
    let mut online = TerCounter::default();
    let mut offline = TerCounter::default();
    let (mut emitted, mut predicted) = (0, 0);
    for (index, u) in utterances.iter().enumerate() {
        let wrap = |e: Error| Error::Utterance {
            index,
            source: Box::new(e),
        };
        let mut s = stream_open(params, cfg, chunk_size)?;
        let mut start = 0;
        while start < u.frames() {
            let len = chunk_size.min(u.frames() - start);
            let r = s.push_chunk(&u.features.slice_rows(start, len)).map_err(wrap)?;
            emitted += r.emitted.len();
            predicted += argmax(&r.count_distribution);
            start += len;
        }
        online.add(&u.transcript, s.hypothesis());
        if mode != EvalMode::Online {
            let fin = s.finalize().map_err(wrap)?;
            offline.add(&u.transcript, &fin.rectified);
        }
    }
    Ok(EvalReport {
        chunk_size,
        utterances: utterances.len(),
        online: (mode != EvalMode::Offline).then_some(online),
        offline: (mode != EvalMode::Online).then_some(offline),
        emitted_tokens: emitted,
        predicted_tokens: predicted,
    })
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training losses since the previous row; NaN on the step-0 row.
    pub losses: LossReport,
    pub dev_ter_online: f64,
    pub dev_ter_offline: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step\tl_online\tl_offline\tl_pred\tl_total\tdev_ter_online\tdev_ter_offline";

    pub fn to_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, l.l_online, l.l_offline, l.l_pred, l.l_total, self.dev_ter_online, self.dev_ter_offline
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    /// Where checkpoints and `metrics.tsv` go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Evaluate on at most this many dev utterances.
    pub dev_limit: Option<usize>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.uasr")
}

fn dev_row(params: &ModelParams, cfg: &ModelConfig, dev: &[Utterance], step: usize, losses: LossReport) -> Result<MetricsRow> {
    let c = *cfg.chunk_sizes.iter().max().expect("validated nonempty");
    let r = evaluate(params, cfg, dev, c, EvalMode::Both)?;
    Ok(MetricsRow {
        step,
        losses,
        dev_ter_online: r.online_ter().expect("both"),
        dev_ter_offline: r.offline_ter().expect("both"),
    })
}

fn mean_losses(acc: &[LossReport]) -> LossReport {
    let n = acc.len() as f64;
    let mut m = LossReport::default();
    for r in acc {
        m.l_online += r.l_online / n;
        m.l_offline += r.l_offline / n;
        m.l_pred += r.l_pred / n;
        m.l_total += r.l_total / n;
    }
    m
}

/// Trains from a seeded initialization. Rows are produced at step 0, every `eval_every`
/// steps and at the last step; `on_row` sees each as it is logged.
pub fn train(
    cfg: &ModelConfig,
    data: &Dataset,
    opts: &TrainOptions,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() && opts.steps > 0 {
        return Err(Error::config("train_utterances", "no training data"));
    }
    let mut params = init_model(cfg, opts.seed)?;
    let mut opt = OptimizerState::new(cfg.schedule(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7261_696e);
    let dev = &data.dev[..opts.dev_limit.unwrap_or(data.dev.len()).min(data.dev.len())];

    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("metrics.tsv"))?;
            writeln!(f, "{}", MetricsRow::HEADER)?;
            Some(f)
        }
        None => None,
    };
    let mut checkpoints = Vec::new();
    let save = |params: &ModelParams, step: usize, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            let path = dir.join(checkpoint_name(step));
            checkpoint_save(params, cfg, &path)?;
            checkpoints.push(path);
        }
        Ok(())
    };
    save(&params, 0, &mut checkpoints)?;

    let mut rows = Vec::new();
    let mut emit = |row: MetricsRow, rows: &mut Vec<MetricsRow>| -> Result<()> {
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", row.to_line())?;
            f.flush()?;
        }
        on_row(&row);
        rows.push(row);
        Ok(())
    };
    if opts.steps > 0 {
        let nan = LossReport {
            l_online: f64::NAN,
            l_offline: f64::NAN,
            l_pred: f64::NAN,
            l_total: f64::NAN,
        };
        emit(dev_row(&params, cfg, dev, 0, nan)?, &mut rows)?;
    }

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let mut since_row = Vec::new();
    for step in 1..=opts.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data.train[order[cursor]]);
            cursor += 1;
        }
        let report = universal_training_step(&batch, &mut params, &mut opt, cfg, &mut rng).map_err(|e| Error::Step {
            step,
            source: Box::new(e),
        })?;
        since_row.push(report);
        if step % cfg.eval_every == 0 || step == opts.steps {
            let row = dev_row(&params, cfg, dev, step, mean_losses(&since_row))?;
            since_row.clear();
            emit(row, &mut rows)?;
            save(&params, step, &mut checkpoints)?;
        }
    }
    Ok(TrainOutcome {
        params,
        rows,
        checkpoints,
    })
}

/// Renders evaluation reports as a tab-separated table.
pub fn format_reports(reports: &[EvalReport], frame_period_ms: f64) -> String {
    let mut s = String::from("chunk_size\tlatency_ms\tutterances\tonline_ter\toffline_ter\temitted\tpredicted\n");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for r in reports {
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.chunk_size,
            latency_of_chunk_size(r.chunk_size, frame_period_ms),
            r.utterances,
            fmt(r.online_ter()),
            fmt(r.offline_ter()),
            r.emitted_tokens,
            r.predicted_tokens
        )
        .expect("write to string");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_dataset_generate, DatasetManifest};

    fn tiny() -> (ModelConfig, Dataset) {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            predictor_hidden: 8,
            vocab_size: 3 + 4,
            batch_size: 2,
            eval_every: 2,
            ..ModelConfig::default()
        };
        let m = DatasetManifest {
            vocab_size: 4,
            train_utterances: 6,
            dev_utterances: 2,
            test_utterances: 2,
            ..DatasetManifest::default()
        };
        (cfg, synth_dataset_generate(&m).unwrap())
    }

    #[test]
    fn zero_steps_writes_only_initial_checkpoint() {
        let (cfg, data) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            steps: 0,
            seed: 1,
            out_dir: Some(dir.path().to_path_buf()),
            dev_limit: None,
        };
        let out = train(&cfg, &data, &opts, |_| {}).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.checkpoints, vec![dir.path().join("step_000000.uasr")]);
        let log = fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
        assert_eq!(log.trim_end(), MetricsRow::HEADER);
    }

    #[test]
    fn fixed_seed_gives_identical_logs() {
        let (cfg, data) = tiny();
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let opts = TrainOptions {
                steps: 3,
                seed: 9,
                out_dir: Some(dir.path().to_path_buf()),
                dev_limit: None,
            };
            let out = train(&cfg, &data, &opts, |_| {}).unwrap();
            assert_eq!(out.rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2, 3]);
            fs::read_to_string(dir.path().join("metrics.tsv")).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_modes_and_count_bookkeeping() {
        let (cfg, data) = tiny();
        let p = init_model(&cfg, 0).unwrap();
        let both = evaluate(&p, &cfg, &data.test, 4, EvalMode::Both).unwrap();
        assert_eq!(both.emitted_tokens, both.predicted_tokens);
        assert!(both.online.is_some() && both.offline.is_some());
        let on = evaluate(&p, &cfg, &data.test, 4, EvalMode::Online).unwrap();
        assert!(on.offline.is_none());
        assert_eq!(on.online, both.online);
        assert!(matches!(
            evaluate(&p, &cfg, &data.test, 5, EvalMode::Both),
            Err(Error::Config { .. })
        ));
        let table = format_reports(&[both], cfg.frame_period_ms);
        assert_eq!(table.lines().count(), 2);
        assert!("sideways".parse::<EvalMode>().is_err());
    }
}
