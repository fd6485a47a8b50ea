use serde::{Deserialize, Serialize};

use crate::align::AlignmentCheckpoint;
use crate::corpus::NliRecord;
use crate::encoders::{Bound, GroupAdam, Linear, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const NLI_CLASSES: usize = 3;

/// `(e_p, e_h, |e_p - e_h|, e_p * e_h)`.
pub fn nli_features<T: Scalar>(e_p: &[T], e_h: &[T]) -> Result<Vec<T>> {
    if e_p.len() != e_h.len() {
        return Err(Error::Format(format!(
            "premise width {} differs from hypothesis width {}",
            e_p.len(),
            e_h.len()
        )));
    }
    let mut out = Vec::with_capacity(4 * e_p.len());
    out.extend_from_slice(e_p);
    out.extend_from_slice(e_h);
    out.extend(e_p.iter().zip(e_h).map(|(&a, &b)| (a - b).abs()));
    out.extend(e_p.iter().zip(e_h).map(|(&a, &b)| a * b));
    Ok(out)
}

/// Probe inputs and labels for a set of NLI records, embedded by the frozen
/// text tower.
pub fn nli_dataset_features<T: Scalar>(
    ck: &AlignmentCheckpoint<T>,
    records: &[NliRecord],
) -> Result<(Vec<Vec<T>>, Vec<usize>)> {
    let prem: Vec<&[u32]> = records.iter().map(|r| r.premise.tokens.as_slice()).collect();
    let hyp: Vec<&[u32]> = records.iter().map(|r| r.hypothesis.tokens.as_slice()).collect();
    let ep = ck.embed_texts(&prem)?;
    let eh = ck.embed_texts(&hyp)?;
    let x = ep
        .iter()
        .zip(&eh)
        .map(|(p, h)| nli_features(p, h))
        .collect::<Result<Vec<_>>>()?;
    Ok((x, records.iter().map(|r| r.label as usize).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for NliProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            lr: 1e-3,
            batch_size: 64,
            epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

/// Feed-forward classifier with two GELU hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct NliProbe<T> {
    pub store: ParamStore<T>,
    pub input: usize,
    pub layers: [Linear; 3],
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
}

impl<T: Scalar> NliProbe<T> {
    pub fn init(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::derive(seed, &[0x9E0BE]);
        let mut store = ParamStore::new();
        let g = ParamGroup::Head;
        let layers = [
            Linear::uniform(&mut store, "probe.h1", g, input, hidden, &mut rng),
            Linear::uniform(&mut store, "probe.h2", g, hidden, hidden, &mut rng),
            Linear::uniform(&mut store, "probe.out", g, hidden, NLI_CLASSES, &mut rng),
        ];
        Self {
            store,
            input,
            layers,
            best_epoch: 0,
            best_dev_accuracy: 0.0,
        }
    }

    fn stack(&self, xs: &[&Vec<T>]) -> Result<Tensor<T>> {
        if let Some(x) = xs.iter().find(|x| x.len() != self.input) {
            return Err(Error::Format(format!(
                "feature width {} differs from probe input {}",
                x.len(),
                self.input
            )));
        }
        let data = xs.iter().flat_map(|x| x.iter().copied()).collect();
        Ok(Tensor::new(vec![xs.len(), self.input], data)?)
    }

    fn logits(&self, tape: &mut Tape<T>, x: Tensor<T>, trainable: bool) -> Result<(Bound, Var)> {
        let bound = self.store.bind(tape, |_| trainable);
        let mut h = tape.constant(x);
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, &bound, h)?;
            if i + 1 < self.layers.len() {
                h = tape.gelu(h)?;
            }
        }
        Ok((bound, h))
    }

    pub fn predict(&self, xs: &[Vec<T>]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(512) {
            let refs: Vec<&Vec<T>> = chunk.iter().collect();
            let mut tape = Tape::new();
            let (_, z) = self.logits(&mut tape, self.stack(&refs)?, false)?;
            for row in tape.value(z).data().chunks(NLI_CLASSES) {
                let mut arg = 0;
                for j in 1..NLI_CLASSES {
                    if row[j] > row[arg] {
                        arg = j;
                    }
                }
                out.push(arg);
            }
        }
        Ok(out)
    }

    pub fn accuracy(&self, xs: &[Vec<T>], labels: &[usize]) -> Result<f64> {
        check_labels(xs, labels)?;
        let pred = self.predict(xs)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn check_labels<T>(xs: &[Vec<T>], labels: &[usize]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if xs.len() != labels.len() {
        return Err(Error::Format(format!(
            "{} feature rows but {} labels",
            xs.len(),
            labels.len()
        )));
    }
    match labels.iter().find(|&&l| l >= NLI_CLASSES) {
        Some(&l) => Err(Error::BadLabel(l)),
        None => Ok(()),
    }
}

/// Minibatch Adam on cross entropy, evaluated on dev after every epoch.
/// Returns the parameters from the best dev epoch (earliest on ties).
pub fn train_nli_probe<T: Scalar>(
    train_x: &[Vec<T>],
    train_y: &[usize],
    dev_x: &[Vec<T>],
    dev_y: &[usize],
    cfg: &NliProbeConfig,
) -> Result<NliProbe<T>> {
    check_labels(train_x, train_y)?;
    check_labels(dev_x, dev_y)?;
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::Config("probe batch size and hidden width must be positive".into()));
    }
    let mut probe = NliProbe::init(train_x[0].len(), cfg.hidden, cfg.seed);
    let mut opt = GroupAdam::new(&probe.store, |_| cfg.lr);
    let mut rng = SplitMix64::derive(cfg.seed, &[0x9E0BE, 1]);
    let mut best = probe.clone();
    best.best_dev_accuracy = probe.accuracy(dev_x, dev_y)?;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&Vec<T>> = batch.iter().map(|&i| &train_x[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let mut tape = Tape::new();
            let (bound, z) = probe.logits(&mut tape, probe.stack(&xs)?, true)?;
            let loss = tape.softmax_cross_entropy(z, &ys)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFiniteLoss(epoch));
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut probe.store, &bound, &grads)?;
        }
        let acc = probe.accuracy(dev_x, dev_y)?;
        if acc > best.best_dev_accuracy {
            best = probe.clone();
            best.best_epoch = epoch;
            best.best_dev_accuracy = acc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliRow {
    pub lang: String,
    pub seen_in_finetune: bool,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliReport {
    pub encoder: String,
    pub rows: Vec<NliRow>,
    /// Mean over every row.
    pub mean: f64,
    /// Mean over rows other than the pivot, where every prediction is a
    /// cross-lingual transfer.
    pub transfer_mean: f64,
}

impl NliReport {
    pub fn accuracy(&self, lang: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.lang == lang).map(|r| r.accuracy)
    }
}

/// Per-language accuracy of `probe` on the multilingual test split, in the
/// order languages first appear in `test`.
pub fn eval_nli<T: Scalar>(
    encoder: &str,
    probe: &NliProbe<T>,
    ck: &AlignmentCheckpoint<T>,
    test: &[NliRecord],
    finetune_langs: &[String],
    pivot: &str,
) -> Result<NliReport> {
    let mut langs: Vec<&str> = Vec::new();
    for r in test {
        if !langs.contains(&r.lang.as_str()) {
            langs.push(&r.lang);
        }
    }
    let mut rows = Vec::with_capacity(langs.len());
    for lang in langs {
        let recs: Vec<NliRecord> = test.iter().filter(|r| r.lang == lang).cloned().collect();
        let (x, y) = nli_dataset_features(ck, &recs)?;
        rows.push(NliRow {
            lang: lang.to_string(),
            seen_in_finetune: finetune_langs.iter().any(|l| l == lang),
            accuracy: probe.accuracy(&x, &y)?,
        });
    }
    nli_report(encoder, rows, pivot)
}

/// Assembles a report, computing both means from `rows`.
pub fn nli_report(encoder: &str, rows: Vec<NliRow>, pivot: &str) -> Result<NliReport> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
    let other: Vec<f64> = rows
        .iter()
        .filter(|r| r.lang != pivot)
        .map(|r| r.accuracy)
        .collect();
    let transfer_mean = if other.is_empty() {
        mean
    } else {
        other.iter().sum::<f64>() / other.len() as f64
    };
    Ok(NliReport {
        encoder: encoder.to_string(),
        rows,
        mean,
        transfer_mean,
    })
}
