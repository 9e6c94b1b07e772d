//! Learning-rate schedules and per-epoch task scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;

/// Frames per hour of audio at a 10 ms hop.
pub const FRAMES_PER_HOUR: f64 = 360_000.0;

/// Linear warm-up from 0 to `peak` over `warmup` steps, then linear decay
/// to 0 at `total`.
pub fn lr_linear(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total == warmup {
        peak
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Stage fractions of a tri-stage schedule; they must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriStage {
    pub warm: f64,
    pub hold: f64,
    pub decay: f64,
}

impl Default for TriStage {
    fn default() -> Self {
        Self {
            warm: 0.1,
            hold: 0.4,
            decay: 0.5,
        }
    }
}

/// Linear warm-up, constant hold, then linear decay to `floor_ratio * peak`.
pub fn lr_tristage(step: usize, total: usize, stages: TriStage, peak: f64, floor_ratio: f64) -> f64 {
    let step = step.min(total) as f64;
    let total = total as f64;
    let warm_end = stages.warm * total;
    let hold_end = (stages.warm + stages.hold) * total;
    if step < warm_end {
        peak * step / warm_end
    } else if step <= hold_end || total <= hold_end {
        peak
    } else {
        let frac = (step - hold_end) / (total - hold_end);
        peak * (1.0 - frac) + peak * floor_ratio * frac
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Speech,
    Text,
    Paired,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Speech => "speech",
            Task::Text => "text",
            Task::Paired => "paired",
        }
    }
}

/// One batch: a task and the indices of its items in that task's pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub task: Task,
    pub items: Vec<usize>,
}

/// Sizes of the data pools a schedule draws from.
#[derive(Clone, Debug, Default)]
pub struct TaskSources {
    /// Frame count per speech utterance.
    pub speech_frames: Vec<usize>,
    /// Number of text sentences available.
    pub text_count: usize,
    /// Sentences per text batch.
    pub text_batch: usize,
    /// Frame count per paired utterance.
    pub paired_frames: Vec<usize>,
    pub batch_frames: usize,
    pub text_enabled: bool,
}

/// Paired utterances covering `hours` of audio, taken in order; 0 hours
/// selects none.
pub fn select_paired(frames: &[usize], hours: f64) -> Vec<usize> {
    if hours <= 0.0 {
        return Vec::new();
    }
    let budget = hours * FRAMES_PER_HOUR;
    let mut total = 0.0;
    let mut out = Vec::new();
    for (i, &f) in frames.iter().enumerate() {
        if total >= budget {
            break;
        }
        out.push(i);
        total += f as f64;
    }
    out
}

/// Greedily fills batches up to `budget` frames; every batch has at least
/// one item.
pub fn pack(order: &[usize], frames: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for &i in order {
        if !current.is_empty() && used + frames[i] > budget {
            out.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += frames[i];
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// One epoch of batches: all speech, an equal number of sampled text
/// batches, all paired; shuffled with a seed derived from `seed` and `epoch`.
pub fn schedule_tasks(sources: &TaskSources, epoch: u64, seed: u64) -> Result<Vec<Batch>, TrainError> {
    if sources.speech_frames.is_empty() {
        return Err(TrainError::Data("speech manifest is empty".into()));
    }
    if sources.text_enabled && (sources.text_count == 0 || sources.text_batch == 0) {
        return Err(TrainError::Data("text task enabled but no text sentences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..sources.speech_frames.len()).collect();
    order.shuffle(&mut rng);
    let speech = pack(&order, &sources.speech_frames, sources.batch_frames);
    let mut batches: Vec<Batch> = speech
        .into_iter()
        .map(|items| Batch {
            task: Task::Speech,
            items,
        })
        .collect();
    if sources.text_enabled {
        let wanted = batches.len();
        let mut pool: Vec<usize> = Vec::new();
        for _ in 0..wanted {
            let mut items = Vec::with_capacity(sources.text_batch);
            while items.len() < sources.text_batch {
                if pool.is_empty() {
                    pool = (0..sources.text_count).collect();
                    pool.shuffle(&mut rng);
                }
                items.push(pool.pop().expect("refilled"));
            }
            batches.push(Batch { task: Task::Text, items });
        }
    }
    if !sources.paired_frames.is_empty() {
        let mut order: Vec<usize> = (0..sources.paired_frames.len()).collect();
        order.shuffle(&mut rng);
        for items in pack(&order, &sources.paired_frames, sources.batch_frames) {
            batches.push(Batch {
                task: Task::Paired,
                items,
            });
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_points() {
        assert_eq!(lr_linear(0, 10, 110, 5e-4), 0.0);
        assert_eq!(lr_linear(10, 10, 110, 5e-4), 5e-4);
        assert_eq!(lr_linear(60, 10, 110, 5e-4), 2.5e-4);
        assert_eq!(lr_linear(110, 10, 110, 5e-4), 0.0);
        assert_eq!(lr_linear(5, 10, 110, 5e-4), 2.5e-4);
        assert_eq!(lr_linear(3, 0, 0, 1.0), 1.0);
    }

    #[test]
    fn tristage_points() {
        let s = TriStage::default();
        assert_eq!(lr_tristage(0, 100, s, 1e-3, 0.05), 0.0);
        assert_eq!(lr_tristage(10, 100, s, 1e-3, 0.05), 1e-3);
        assert_eq!(lr_tristage(50, 100, s, 1e-3, 0.05), 1e-3);
        assert_eq!(lr_tristage(100, 100, s, 1e-3, 0.05), 1e-3 * 0.05);
        assert_eq!(lr_tristage(5, 100, s, 1e-3, 0.05), 5e-4);
        let mid = lr_tristage(75, 100, s, 1e-3, 0.05);
        assert!((mid - 1e-3 * 0.525).abs() < 1e-18);
    }

    fn sources(speech: usize, paired: usize) -> TaskSources {
        TaskSources {
            speech_frames: vec![50; speech],
            text_count: 30,
            text_batch: 2,
            paired_frames: vec![50; paired],
            batch_frames: 100,
            text_enabled: true,
        }
    }

    #[test]
    fn equal_text_batches_and_all_paired() {
        let b = schedule_tasks(&sources(20, 6), 0, 7).unwrap();
        let count = |t: Task| b.iter().filter(|x| x.task == t).count();
        assert_eq!(count(Task::Speech), 10);
        assert_eq!(count(Task::Text), 10);
        let mut paired: Vec<usize> = b.iter().filter(|x| x.task == Task::Paired).flat_map(|x| x.items.clone()).collect();
        paired.sort_unstable();
        assert_eq!(paired, (0..6).collect::<Vec<_>>());
        assert_eq!(b, schedule_tasks(&sources(20, 6), 0, 7).unwrap());
        assert_ne!(b, schedule_tasks(&sources(20, 6), 1, 7).unwrap());
    }

    #[test]
    fn zero_paired_hours_means_no_paired_batches() {
        assert!(select_paired(&[100, 200], 0.0).is_empty());
        assert_eq!(select_paired(&[100, 200], 1.0), vec![0, 1]);
        assert_eq!(select_paired(&[360_000, 5, 5], 1.0), vec![0]);
        let b = schedule_tasks(&sources(4, 0), 0, 1).unwrap();
        assert!(b.iter().all(|x| x.task != Task::Paired));
        assert!(schedule_tasks(&sources(0, 0), 0, 1).is_err());
    }

    #[test]
    fn packing_respects_budget() {
        let frames = [60, 30, 30, 120, 10];
        let batches = pack(&[0, 1, 2, 3, 4], &frames, 100);
        assert_eq!(batches, vec![vec![0, 1], vec![2], vec![3], vec![4]]);
    }
}
