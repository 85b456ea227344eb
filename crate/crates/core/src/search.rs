//! The alternating bilevel loop: per step, one SGD update of the network
//! weights on a W-half batch, then (after warm-up) one Adam update of the
//! architecture parameters on an A-half batch, first-order throughout.

use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::data::{batches, split_half, Dataset, Half};
use crate::error::{Error, Result};
use crate::genotype::{derive, jaccard, Genotype};
use crate::ops::BnPolicy;
use crate::rng::stream;
use crate::space::SuperNet;
use crate::tensor::{cosine_lr, Adam, Element, Sgd, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub w_loss: f64,
    pub w_correct: usize,
    pub w_total: usize,
    pub a_loss: f64,
    pub a_correct: usize,
    pub a_total: usize,
    /// Output elements allocated inside mixture subgraphs this step.
    pub peak_elems: u64,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub w_loss: f64,
    pub w_acc: f64,
    pub a_loss: f64,
    pub a_acc: f64,
    pub lr: f64,
    pub peak_act_elems: u64,
    pub seconds: f64,
    pub genotype: Genotype,
    /// SHA-256 over the architecture tensors after this epoch.
    pub arch_digest: String,
}

#[derive(Debug, Clone, Default)]
pub struct SearchLog {
    pub records: Vec<EpochRecord>,
}

impl SearchLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,w_loss,w_acc,a_loss,a_acc,lr,peak_act_elems,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.4},{:.6},{:.4},{:.8},{},{:.3}\n",
                r.epoch, r.w_loss, r.w_acc, r.a_loss, r.a_acc, r.lr, r.peak_act_elems, r.seconds
            ));
        }
        out
    }
}

pub struct SearchOutcome<E: Element> {
    pub net: SuperNet<E>,
    pub log: SearchLog,
    pub genotype: Genotype,
    /// Set when the run hit a non-finite value and was rolled back to the
    /// last completed epoch.
    pub aborted: Option<String>,
    pub sgd_steps: u64,
    pub adam_steps: u64,
}

/// Hex digest of the architecture tensors (order-stable), for bit-identity
/// checks across epochs.
pub fn arch_digest<E: Element>(net: &SuperNet<E>) -> String {
    let mut h = Sha256::new();
    for (name, t) in net.arch.named() {
        h.update(name.as_bytes());
        let mut bytes = Vec::with_capacity(t.numel() * 8);
        for v in t.to_vec() {
            v.write_le(&mut bytes);
        }
        h.update(&bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn accuracy_count<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    let data = logits.to_f64_vec();
    labels
        .iter()
        .enumerate()
        .filter(|(row, &label)| {
            let row = &data[row * classes..(row + 1) * classes];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            best == label
        })
        .count()
}

/// One weight update, then at most one architecture update (skipped during
/// warm-up, where the A-batch is only evaluated). The weight optimizer owns
/// exactly the network weights and the arch optimizer exactly (α, β), so
/// each update leaves the other group bit-untouched.
#[allow(clippy::too_many_arguments)]
pub fn alternating_step<E: Element>(
    net: &SuperNet<E>,
    w_opt: &mut Sgd<E>,
    a_opt: &mut Adam<E>,
    w_batch: (&Tensor<E>, &[usize]),
    a_batch: (&Tensor<E>, &[usize]),
    lr: f64,
    arch_lr: f64,
    arch_active: bool,
) -> Result<StepMetrics> {
    // Weight pass: architecture tensors don't need gradients here.
    net.arch.set_trainable(false);
    let tape = Tape::<E>::new();
    tape.reset_region_alloc();
    let logits = net.forward(&tape, w_batch.0, BnPolicy::BatchStats)?;
    let loss = tape.cross_entropy(&logits, w_batch.1)?;
    let w_loss = loss.to_f64_vec()[0];
    let w_correct = accuracy_count(&logits, w_batch.1);
    tape.backward(&loss)?;
    w_opt.step(E::from_f64(lr))?;
    w_opt.zero_grads();
    net.arch.set_trainable(true);
    let mut peak_elems = tape.region_alloc_elems();
    drop(tape);

    let (a_loss, a_correct) = if arch_active {
        // Arch pass: freeze ω so backward skips weight-gradient work.
        for (_, t) in w_opt.params() {
            t.set_requires_grad(false);
        }
        let tape = Tape::<E>::new();
        tape.reset_region_alloc();
        let step = || -> Result<(f64, usize)> {
            let logits = net.forward(&tape, a_batch.0, BnPolicy::BatchStats)?;
            let loss = tape.cross_entropy(&logits, a_batch.1)?;
            let value = loss.to_f64_vec()[0];
            let correct = accuracy_count(&logits, a_batch.1);
            tape.backward(&loss)?;
            Ok((value, correct))
        };
        let result = step();
        for (_, t) in w_opt.params() {
            t.set_requires_grad(true);
        }
        let (value, correct) = result?;
        a_opt.step(E::from_f64(arch_lr))?;
        a_opt.zero_grads();
        peak_elems = peak_elems.max(tape.region_alloc_elems());
        (value, correct)
    } else {
        // Warm-up: score the A-batch without recording or updating anything.
        let tape = Tape::<E>::new();
        tape.reset_region_alloc();
        let (value, correct) = tape.no_grad(|| -> Result<(f64, usize)> {
            let logits = net.forward(&tape, a_batch.0, BnPolicy::BatchStats)?;
            let loss = tape.cross_entropy(&logits, a_batch.1)?;
            Ok((loss.to_f64_vec()[0], accuracy_count(&logits, a_batch.1)))
        })?;
        peak_elems = peak_elems.max(tape.region_alloc_elems());
        (value, correct)
    };

    Ok(StepMetrics {
        w_loss,
        w_correct,
        w_total: w_batch.1.len(),
        a_loss,
        a_correct,
        a_total: a_batch.1.len(),
        peak_elems,
    })
}

type Snapshot<E> = Vec<(String, Vec<E>)>;

fn take_snapshot<E: Element>(net: &SuperNet<E>) -> Snapshot<E> {
    net.weight_params()
        .into_iter()
        .chain(net.arch.named())
        .map(|(name, t)| (name, t.to_vec()))
        .collect()
}

fn restore_snapshot<E: Element>(net: &SuperNet<E>, snap: &Snapshot<E>) -> Result<()> {
    let live: Vec<(String, Tensor<E>)> =
        net.weight_params().into_iter().chain(net.arch.named()).collect();
    for ((name, data), (live_name, tensor)) in snap.iter().zip(live) {
        debug_assert_eq!(name, &live_name);
        tensor.set_data(data)?;
    }
    Ok(())
}

/// Per-epoch shuffle seed. Exposed so external replay loops can reproduce
/// the exact batch order of a run from its base seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Builds the super-network from the config and runs the full search.
pub fn run_search<E: Element>(cfg: &Config, dataset: &Dataset) -> Result<SearchOutcome<E>> {
    cfg.validate()?;
    let net = SuperNet::build(cfg.net_spec(dataset.classes), cfg.search.seed)?;
    run_search_on(net, cfg, dataset)
}

/// Search loop over an already-built super-network. On a non-finite loss or
/// activation the run stops, parameters roll back to the last completed
/// epoch, and the outcome reports the abort reason alongside the partial log.
pub fn run_search_on<E: Element>(
    net: SuperNet<E>,
    cfg: &Config,
    dataset: &Dataset,
) -> Result<SearchOutcome<E>> {
    cfg.validate()?;
    let s = &cfg.search;
    let plan = split_half(dataset.count(), s.seed)?;
    let steps_per_epoch = plan.w.len() / s.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Data(format!(
            "dataset half of {} examples yields no full batch of {}",
            plan.w.len(),
            s.batch_size
        )));
    }

    let mut w_opt = Sgd::new(
        net.weight_params(),
        E::from_f64(cfg.weight_opt.momentum),
        E::from_f64(cfg.weight_opt.weight_decay),
    );
    let mut a_opt = Adam::new(
        net.arch_params(),
        (E::from_f64(cfg.arch_opt.beta1), E::from_f64(cfg.arch_opt.beta2)),
        E::from_f64(cfg.arch_opt.weight_decay),
    );

    let total_steps = (s.epochs * steps_per_epoch) as u64;
    let mut aug_rng = cfg.data.augment.then(|| stream(s.seed, "augment"));
    let mut log = SearchLog::default();
    let mut snapshot = take_snapshot(&net);
    let mut aborted = None;

    'epochs: for epoch in 0..s.epochs {
        let started = Instant::now();
        let arch_active = epoch >= s.warm_up_epochs;
        let w_batches = batches(&plan, Half::W, s.batch_size, epoch_seed(s.seed, epoch))?;
        let a_batches = batches(&plan, Half::A, s.batch_size, epoch_seed(s.seed, epoch))?;

        let mut w_loss_sum = 0.0;
        let mut a_loss_sum = 0.0;
        let (mut w_correct, mut w_total) = (0usize, 0usize);
        let (mut a_correct, mut a_total) = (0usize, 0usize);
        let mut peak = 0u64;
        let mut last_lr = cfg.weight_opt.lr;

        for (w_idx, a_idx) in w_batches.iter().zip(&a_batches) {
            let (wx, wy) = dataset.gather::<E>(w_idx, aug_rng.as_mut())?;
            let (ax, ay) = dataset.gather::<E>(a_idx, None)?;
            let t = w_opt.steps();
            last_lr = cosine_lr(t, total_steps.saturating_sub(1).max(1), cfg.weight_opt.lr)?;
            let step = alternating_step(
                &net,
                &mut w_opt,
                &mut a_opt,
                (&wx, &wy),
                (&ax, &ay),
                last_lr,
                cfg.arch_opt.lr,
                arch_active,
            );
            match step {
                Ok(m) => {
                    w_loss_sum += m.w_loss;
                    a_loss_sum += m.a_loss;
                    w_correct += m.w_correct;
                    w_total += m.w_total;
                    a_correct += m.a_correct;
                    a_total += m.a_total;
                    peak = peak.max(m.peak_elems);
                }
                Err(Error::NonFinite { op, index }) => {
                    restore_snapshot(&net, &snapshot)?;
                    aborted = Some(format!(
                        "non-finite value in '{op}' (record {index}) at epoch {epoch}; rolled back to epoch {}",
                        epoch.saturating_sub(1)
                    ));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let n = w_batches.len() as f64;
        log.records.push(EpochRecord {
            epoch,
            w_loss: w_loss_sum / n,
            w_acc: w_correct as f64 / w_total.max(1) as f64,
            a_loss: a_loss_sum / n,
            a_acc: a_correct as f64 / a_total.max(1) as f64,
            lr: last_lr,
            peak_act_elems: peak,
            seconds: started.elapsed().as_secs_f64(),
            genotype: derive(&net.arch, s.edge_normalization)?,
            arch_digest: arch_digest(&net),
        });
        snapshot = take_snapshot(&net);
    }

    let genotype = derive(&net.arch, s.edge_normalization)?;
    Ok(SearchOutcome {
        net,
        log,
        genotype,
        aborted,
        sgd_steps: w_opt.steps(),
        adam_steps: a_opt.steps(),
    })
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub seed: u64,
    pub genotype: Genotype,
    pub final_w_acc: f64,
    pub final_a_acc: f64,
    pub peak_act_elems: u64,
    pub seconds: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub mean_acc: f64,
    pub acc_std: f64,
    pub mean_jaccard: f64,
    pub min_jaccard: f64,
}

/// Repeats the search across seeds (up to `jobs` runs in parallel) and
/// summarizes genotype agreement and accuracy dispersion.
pub fn seed_sweep<E: Element>(cfg: &Config, seeds: &[u64], jobs: usize) -> Result<SweepReport> {
    if seeds.len() < 2 {
        return Err(Error::Config("seed sweep needs at least 2 seeds".into()));
    }
    let dataset = cfg.load_dataset()?;
    let mut entries = Vec::with_capacity(seeds.len());
    for group in seeds.chunks(jobs.max(1)) {
        let mut results: Vec<Result<SweepEntry>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = group
                .iter()
                .map(|&seed| {
                    let dataset = &dataset;
                    scope.spawn(move || -> Result<SweepEntry> {
                        let mut run_cfg = cfg.clone();
                        run_cfg.search.seed = seed;
                        let outcome = run_search::<E>(&run_cfg, dataset)?;
                        let last = outcome.log.records.last();
                        Ok(SweepEntry {
                            seed,
                            genotype: outcome.genotype,
                            final_w_acc: last.map_or(0.0, |r| r.w_acc),
                            final_a_acc: last.map_or(0.0, |r| r.a_acc),
                            peak_act_elems: last.map_or(0, |r| r.peak_act_elems),
                            seconds: outcome.log.records.iter().map(|r| r.seconds).sum(),
                            aborted: outcome.aborted.is_some(),
                        })
                    })
                })
                .collect();
            for h in handles {
                results.push(h.join().expect("sweep worker panicked"));
            }
        });
        for r in results {
            entries.push(r?);
        }
    }

    let accs: Vec<f64> = entries.iter().map(|e| e.final_a_acc).collect();
    let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
    let acc_std = (accs.iter().map(|a| (a - mean_acc).powi(2)).sum::<f64>() / accs.len() as f64)
        .sqrt();
    let mut sims = Vec::new();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            sims.push(jaccard(&entries[i].genotype, &entries[j].genotype));
        }
    }
    let mean_jaccard = sims.iter().sum::<f64>() / sims.len() as f64;
    let min_jaccard = sims.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(SweepReport { entries, mean_acc, acc_std, mean_jaccard, min_jaccard })
}
