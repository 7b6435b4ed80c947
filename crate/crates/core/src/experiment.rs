//! Drives a [`StreamPlan`] through an in-process federation and scores the
//! global model after every task.

use std::collections::BTreeSet;

use crate::client::FeatureBundle;
use crate::federation::{Coordinator, InProcess};
use crate::metrics::{accuracy, summarize, AccuracyGrid, RetentionOrientation, RoundMetrics};
use crate::partition::{StreamPlan, VirtualClient};
use crate::registry::ClassId;
use crate::server::{AggregationMode, GlobalModel, ServerState};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub gamma: f64,
    pub mode: AggregationMode,
    pub orientation: RetentionOrientation,
    /// Finalize and score after every task, not only the last one.
    pub eval_every_task: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            mode: AggregationMode::Simplified,
            orientation: RetentionOrientation::default(),
            eval_every_task: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub model: GlobalModel,
    /// Filled in for every task when scoring after each task, otherwise
    /// only the last column.
    pub grid: AccuracyGrid,
    pub metrics: Vec<RoundMetrics>,
    pub clients_run: usize,
    pub skipped: Vec<String>,
    /// Largest number of `f64` values the server side held at any point.
    pub peak_server_values: usize,
}

/// Rows of `pool` that belong to one virtual client.
pub fn client_bundle(pool: &FeatureBundle, client: &VirtualClient) -> FeatureBundle {
    let rows: Vec<usize> = client.samples.iter().map(|&(_, i)| i).collect();
    let labels = rows.iter().map(|&i| pool.labels[i]).collect();
    FeatureBundle::from_labels(client.tag(), pool.features.select_rows(&rows), labels)
}

/// Test rows whose class occurs in `classes`.
pub fn test_subset(test: &FeatureBundle, classes: &BTreeSet<ClassId>) -> FeatureBundle {
    let rows: Vec<usize> = (0..test.samples()).filter(|&i| classes.contains(&test.labels[i])).collect();
    let labels = rows.iter().map(|&i| test.labels[i]).collect();
    FeatureBundle::from_labels(test.client_tag.clone(), test.features.select_rows(&rows), labels)
}

pub fn run_stream(
    pool: &FeatureBundle,
    test: &FeatureBundle,
    plan: &StreamPlan,
    options: &RunOptions,
) -> Result<RunOutcome, Error> {
    if let Some(vc) = plan.clients.iter().find(|vc| vc.samples.iter().any(|&(_, i)| i >= pool.samples())) {
        return Err(Error::Config(format!("plan client {} refers to rows beyond the pool", vc.tag())));
    }
    if test.embedding_width() != pool.embedding_width() {
        return Err(Error::Config(format!(
            "test features have width {}, training features {}",
            test.embedding_width(),
            pool.embedding_width()
        )));
    }
    let tasks = plan.params.tasks;
    let task_tests: Vec<FeatureBundle> = plan.task_classes().iter().map(|c| test_subset(test, c)).collect();
    for (t, sub) in task_tests.iter().enumerate() {
        if sub.samples() == 0 {
            log::warn!("task {} has no test samples; its accuracy is recorded as 0", t + 1);
        }
    }

    let server = ServerState::new(pool.embedding_width(), options.gamma)?;
    let fed = InProcess::new(Coordinator::new(server, options.mode));
    let mut grid = AccuracyGrid::new(tasks);
    let mut skipped = Vec::new();
    let mut clients_run = 0;
    let mut peak = 0;
    let mut model = None;

    for task in 0..tasks {
        for vc in plan.clients.iter().filter(|vc| vc.task == task) {
            if vc.samples.is_empty() {
                log::warn!("skipping {}: no samples", vc.tag());
                skipped.push(vc.tag());
                continue;
            }
            fed.submit(&client_bundle(pool, vc))?;
            clients_run += 1;
            peak = peak.max(fed.coordinator().stored_values());
        }
        if options.eval_every_task || task + 1 == tasks {
            let current = fed.coordinator().finalize()?;
            for (j, sub) in task_tests.iter().enumerate().take(task + 1) {
                grid.set(j + 1, task + 1, accuracy(&current, &sub.features, &sub.labels)?);
            }
            log::info!("task {}: {} clients aggregated", task + 1, clients_run);
            model = Some(current);
        }
    }

    let metrics = if options.eval_every_task { summarize(&grid, options.orientation)? } else { Vec::new() };
    Ok(RunOutcome {
        model: model.expect("last task is always scored"),
        grid,
        metrics,
        clients_run,
        skipped,
        peak_server_values: peak,
    })
}
