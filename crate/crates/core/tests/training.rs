use sia_core::checkpoint::Checkpoint;
use sia_core::config::{Stage, TrainConfig};
use sia_core::scenegen::{generate_dataset, SyntheticScene};
use sia_core::trainer::{run_stage, NullObserver, TrainError, TrainObserver};

fn small(stage: Stage, epochs: usize) -> TrainConfig {
    TrainConfig { stage, epochs, batch_size: 2, tokens: 64, n_instance: 8, n_context: 16, k_context: 4, ..TrainConfig::desk(stage) }
}

fn scenes() -> Vec<SyntheticScene> {
    generate_dataset(30, 3, (3, 5), 1024).unwrap()
}

/// Stops the run after `stop_after` epochs, keeping the last checkpoint.
struct StopAfter {
    stop_after: usize,
    seen: usize,
    last: Option<Checkpoint>,
}

impl TrainObserver for StopAfter {
    fn epoch_end(&mut self, ckpt: &Checkpoint, _: bool) -> Result<(), TrainError> {
        self.seen += 1;
        self.last = Some(ckpt.clone());
        if self.seen == self.stop_after {
            return Err(TrainError::Observer("interrupted".into()));
        }
        Ok(())
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let data = scenes();
    let one = run_stage(&small(Stage::Pretrain, 1), &data, &[], None, 1, &mut NullObserver).unwrap();
    let three = run_stage(&small(Stage::Pretrain, 1), &data, &[], None, 3, &mut NullObserver).unwrap();
    assert_eq!(one.to_bytes(), three.to_bytes());
}

#[test]
fn interrupted_run_resumes_bit_identically() {
    let data = scenes();
    let cfg = small(Stage::Pretrain, 3);
    let full = run_stage(&cfg, &data, &[], None, 1, &mut NullObserver).unwrap();
    let mut stop = StopAfter { stop_after: 1, seen: 0, last: None };
    assert!(run_stage(&cfg, &data, &[], None, 1, &mut stop).is_err());
    let partial = stop.last.unwrap();
    assert_eq!(partial.epoch, 1);
    let resumed = run_stage(&cfg, &data, &[], Some(&partial), 1, &mut NullObserver).unwrap();
    assert_eq!(resumed.to_bytes(), full.to_bytes());
}

#[test]
fn stage_order_is_enforced() {
    let data = scenes();
    let pre = run_stage(&small(Stage::Pretrain, 1), &data, &[], None, 1, &mut NullObserver).unwrap();
    let scst = small(Stage::Scst, 1);
    assert!(matches!(run_stage(&scst, &data, &[], None, 1, &mut NullObserver), Err(TrainError::Prerequisite(_))));
    assert!(matches!(run_stage(&scst, &data, &[], Some(&pre), 1, &mut NullObserver), Err(TrainError::Prerequisite(_))));
    let mle = run_stage(&small(Stage::Mle, 1), &data, &[], Some(&pre), 1, &mut NullObserver).unwrap();
    assert!(matches!(run_stage(&small(Stage::Pretrain, 1), &data, &[], Some(&mle), 1, &mut NullObserver), Err(TrainError::Prerequisite(_))));
    assert!(run_stage(&scst, &data, &[], Some(&mle), 1, &mut NullObserver).is_ok());
}

#[test]
fn architecture_change_on_resume_is_refused() {
    let data = scenes();
    let pre = run_stage(&small(Stage::Pretrain, 1), &data, &[], None, 1, &mut NullObserver).unwrap();
    let mut cfg = small(Stage::Mle, 1);
    cfg.k_context = 8;
    assert!(matches!(run_stage(&cfg, &data, &[], Some(&pre), 1, &mut NullObserver), Err(TrainError::Config(_))));
}

#[test]
fn empty_training_set_is_an_error() {
    assert!(matches!(run_stage(&small(Stage::Pretrain, 1), &[], &[], None, 1, &mut NullObserver), Err(TrainError::EmptyDataset)));
}

#[test]
fn log_lines_follow_the_stage() {
    struct Lines(Vec<String>);
    impl TrainObserver for Lines {
        fn log(&mut self, line: &str) {
            self.0.push(line.to_string());
        }
    }
    let data = scenes();
    let mut pre_log = Lines(vec![]);
    let pre = run_stage(&small(Stage::Pretrain, 1), &data, &data[..1], None, 1, &mut pre_log).unwrap();
    assert!(pre_log.0.iter().any(|l| l.contains("vote=") && !l.contains(" cap=")));
    assert!(pre_log.0.iter().any(|l| l.contains("eval=1") && l.contains("mAP25=")));
    let mut mle_log = Lines(vec![]);
    run_stage(&small(Stage::Mle, 1), &data, &[], Some(&pre), 1, &mut mle_log).unwrap();
    assert!(mle_log.0.iter().all(|l| l.contains(" cap=")));
}
