//! Finite-difference verification of every operator and every loss.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repre_tensor::{finite_difference_check_multi, operator_cases, GradCheckReport, Tape, Tensor, TensorError, Var};

use crate::contrastive::{cosine_loss, info_nce_loss, Negatives, NegativeQueue};
use crate::decoder::reconstruction_loss;
use crate::error::{Error, Result};
use crate::objective::combined_loss;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Aggregate over all instances of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOL
    }
}

fn lift<T>(r: Result<T>) -> repre_tensor::Result<T> {
    r.map_err(|e| match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument { op: "loss", detail: other.to_string() },
    })
}

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> repre_tensor::Result<Var>>;

fn unit_rows(t: Tensor) -> Tensor {
    let d = t.shape()[1];
    let mut t = t;
    for row in t.data_mut().chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// One random instance of each loss: InfoNCE against a queue and against
/// the batch, negative cosine, mean L1, and the weighted combination.
pub fn loss_cases<R: Rng>(rng: &mut R) -> Result<Vec<(&'static str, Vec<Tensor>, LossFn)>> {
    let (b, d) = (3, 4);
    let tau = rng.gen_range(0.1..1.0);
    let mut queue = NegativeQueue::new(5, d)?;
    queue.enqueue_keys(&unit_rows(Tensor::randn(&[5, d], 1.0, rng)?))?;
    let raw = |rng: &mut R| Tensor::randn(&[b, d], 1.0, rng);

    let mut cases: Vec<(&'static str, Vec<Tensor>, LossFn)> = Vec::new();
    cases.push((
        "info_nce/queue",
        vec![raw(rng)?, raw(rng)?],
        Box::new(move |t, v| {
            let q = t.l2_normalize(v[0])?;
            let k = t.l2_normalize(v[1])?;
            lift(info_nce_loss(t, q, k, Negatives::Queue(&queue), tau))
        }),
    ));
    cases.push((
        "info_nce/in-batch",
        vec![raw(rng)?, raw(rng)?],
        Box::new(move |t, v| {
            let q = t.l2_normalize(v[0])?;
            let k = t.l2_normalize(v[1])?;
            lift(info_nce_loss(t, q, k, Negatives::InBatch, tau))
        }),
    ));
    let z = raw(rng)?;
    cases.push((
        "cosine",
        vec![raw(rng)?],
        Box::new(move |t, v| {
            let z = t.constant(z.clone());
            lift(cosine_loss(t, v[0], z))
        }),
    ));
    let img = Tensor::uniform(&[1, 2, 2, 3], 0.0, 1.0, rng)?;
    // Offsets of magnitude at least 0.2 keep every element off the kink.
    let recon = Tensor::new(
        img.shape(),
        img.data()
            .iter()
            .map(|v| v + if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.2..0.4))
            .collect(),
    )?;
    cases.push((
        "reconstruction_l1",
        vec![recon],
        Box::new(move |t, v| {
            let img = t.constant(img.clone());
            lift(reconstruction_loss(t, img, v[0]))
        }),
    ));
    let scalars = [
        rng.gen_range(0.1..3.0),
        rng.gen_range(0.01..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ];
    cases.push((
        "combined",
        scalars.iter().map(|&s| Tensor::scalar(s)).collect(),
        Box::new(|t, v| lift(combined_loss(t, v[0], v[1], v[2], v[3]))),
    ));
    Ok(cases)
}

fn record(table: &mut BTreeMap<String, SuiteEntry>, name: String, report: &GradCheckReport) {
    let e = table.entry(name.clone()).or_insert(SuiteEntry { name, instances: 0, max_rel_error: 0.0 });
    e.instances += 1;
    e.max_rel_error = e.max_rel_error.max(report.max_rel_error);
}

/// Runs `instances` random instances of every operator case and loss case.
pub fn run_gradient_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut table = BTreeMap::new();
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        for case in operator_cases(&mut rng) {
            let report = case.check(EPS, TOL)?;
            record(&mut table, format!("op/{}", case.name), &report);
        }
        for (name, inputs, f) in loss_cases(&mut rng)? {
            let report = finite_difference_check_multi(&f, &inputs, EPS, TOL)?;
            record(&mut table, format!("loss/{name}"), &report);
        }
    }
    Ok(table.into_values().collect())
}
