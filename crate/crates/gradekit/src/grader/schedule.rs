//! Dependency-DAG ensemble training: a location starts once its transfer
//! parent finished; independent subtrees run on a small worker pool. Every
//! model owns a seed stream keyed by (seed, location), so results are
//! identical for any worker count.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};

use crate::error::{Error, Result};
use crate::grader::{train_location, GraderDataset, GraderModel, TrainConfig, UNetConfig};
use crate::phantom::PhantomSubject;
use crate::volgrid::PatchGrid;

struct SchedulerState {
    ready: Vec<usize>,
    done: BTreeMap<usize, GraderModel>,
    remaining: usize,
    in_flight: usize,
    error: Option<Error>,
}

/// Trains all `k^3` specialists over `parallelism` workers, skipping any
/// locations already present in `preloaded` (resume). `on_done` runs on the
/// worker thread right after a location finishes (e.g. to persist it).
pub fn schedule_ensemble<F>(
    grid: &PatchGrid,
    subjects: &[PhantomSubject],
    split: &GraderDataset,
    unet_config: &UNetConfig,
    cfg: &TrainConfig,
    parallelism: usize,
    preloaded: BTreeMap<usize, GraderModel>,
    on_done: F,
) -> Result<Vec<GraderModel>>
where
    F: Fn(&GraderModel) -> Result<()> + Sync,
{
    cfg.validate()?;
    let parallelism = parallelism.max(1);
    let m = grid.len();

    let mut parent_of: BTreeMap<usize, Option<usize>> = BTreeMap::new();
    let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for step in grid.init_order() {
        parent_of.insert(step.location, step.parent);
        if let Some(p) = step.parent {
            children.entry(p).or_default().push(step.location);
        }
    }

    let mut ready = Vec::new();
    let mut remaining = 0usize;
    for step in grid.init_order() {
        if preloaded.contains_key(&step.location) {
            continue;
        }
        remaining += 1;
        let unblocked = match step.parent {
            None => true,
            Some(p) => preloaded.contains_key(&p),
        };
        if unblocked {
            ready.push(step.location);
        }
    }

    let state = Mutex::new(SchedulerState {
        ready,
        done: preloaded,
        remaining,
        in_flight: 0,
        error: None,
    });
    let cvar = Condvar::new();

    std::thread::scope(|scope| {
        for _ in 0..parallelism {
            scope.spawn(|| {
                loop {
                    let j = {
                        let mut s = state.lock().expect("scheduler lock");
                        loop {
                            if s.error.is_some() || s.remaining == 0 {
                                return;
                            }
                            if let Some(j) = s.ready.pop() {
                                s.in_flight += 1;
                                break j;
                            }
                            if s.in_flight == 0 {
                                s.error = Some(Error::Contract(
                                    "scheduler stalled with no ready locations".into(),
                                ));
                                cvar.notify_all();
                                return;
                            }
                            s = cvar.wait(s).expect("scheduler lock");
                        }
                    };

                    // only the direct parent is needed for initialization
                    let parent_map = {
                        let s = state.lock().expect("scheduler lock");
                        let mut map = BTreeMap::new();
                        if let Some(Some(p)) = parent_of.get(&j) {
                            if let Some(model) = s.done.get(p) {
                                map.insert(*p, model.clone());
                            }
                        }
                        map
                    };

                    let outcome =
                        train_location(j, subjects, split, grid, unet_config, cfg, &parent_map)
                            .and_then(|model| {
                                on_done(&model)?;
                                Ok(model)
                            });

                    let mut s = state.lock().expect("scheduler lock");
                    s.in_flight -= 1;
                    match outcome {
                        Ok(model) => {
                            log::info!(
                                "location {j} trained: alpha {:.3}, {} epoch(s), val loss {:.4}",
                                model.alpha,
                                model.epochs_trained,
                                model.best_val_loss
                            );
                            s.done.insert(j, model);
                            s.remaining -= 1;
                            if let Some(kids) = children.get(&j) {
                                for &c in kids {
                                    if !s.done.contains_key(&c) {
                                        s.ready.push(c);
                                    }
                                }
                            }
                        }
                        Err(e) => {
                            let err = match e {
                                e @ Error::Scheduling { .. } => e,
                                other => Error::Scheduling {
                                    location: j,
                                    message: other.to_string(),
                                },
                            };
                            if s.error.is_none() {
                                s.error = Some(err);
                            }
                        }
                    }
                    cvar.notify_all();
                }
            });
        }
    });

    let mut s = state.into_inner().expect("scheduler lock");
    if let Some(e) = s.error.take() {
        return Err(e);
    }
    let models: Vec<GraderModel> = std::mem::take(&mut s.done).into_values().collect();
    if models.len() != m {
        return Err(Error::Contract(format!(
            "scheduler finished with {} of {m} locations",
            models.len()
        )));
    }
    Ok(models)
}
