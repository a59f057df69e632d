use super::*;

fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.arch = "adaptive".into();
    cfg.env = "catch".into();
    cfg.frame_size = 8;
    cfg.frame_stack = 2;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.emb_size = 8;
    cfg.n_layer = 1;
    cfg.mem_len = 8;
    cfg.unroll_length = 15;
    cfg.chunk_size = 5;
    cfg.num_buffers = 8;
    cfg.batch_size = 2;
    cfg.num_actors = 1;
    cfg.total_steps = 60;
    cfg.lstm_hidden = 8;
    cfg.answer_hidden = 8;
    cfg.metrics_window = 10;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn create_buffers_preloads_free_queue() {
    let (buffers, _tx, rx) = create_buffers(4, 3, 10, 3, 1, 1).unwrap();
    assert_eq!(buffers.len(), 4);
    let mut seen: Vec<usize> = (0..4).map(|_| rx.try_recv().unwrap()).collect();
    seen.sort_unstable();
    assert_eq!(seen, vec![0, 1, 2, 3]);
    assert!(rx.try_recv().is_err());
}

#[test]
fn create_buffers_rejects_starved_pool() {
    let err = create_buffers(4, 3, 10, 3, 3, 2).map(|_| ()).unwrap_err().to_string();
    assert!(err.contains("num_buffers"), "{err}");
}

#[test]
fn actor_fill_is_deterministic_and_resets_state_at_done() {
    let cfg = tiny_config();
    let fill_once = || {
        let mut worker = ActorWorker::new(&cfg, 0).unwrap();
        let mut buf = RolloutBuffer::new(
            cfg.unroll_length,
            cfg.frame_stack * cfg.frame_size * cfg.frame_size,
            3,
        );
        let (tx, _rx) = unbounded();
        worker.fill(&mut buf, &tx).unwrap();
        buf
    };
    let a = fill_once();
    let b = fill_once();
    assert_eq!(a.actions, b.actions);
    for (x, y) in a.observation.iter().zip(&b.observation) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    for (x, y) in a.policy_logits.iter().zip(&b.policy_logits) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    // catch episodes last exactly 10 steps, so the 15-step unroll spans a
    // done at t=9 and the next episode starts inside the same buffer
    assert!(a.done[9]);
    assert!(!a.done[10]);
}

#[test]
fn stored_behaviour_logits_match_recompute_from_stored_observations() {
    let cfg = tiny_config();
    let mut worker = ActorWorker::new(&cfg, 0).unwrap();
    let mut buf =
        RolloutBuffer::new(cfg.unroll_length, cfg.frame_stack * cfg.frame_size * cfg.frame_size, 3);
    let (tx, _rx) = unbounded();
    worker.fill(&mut buf, &tx).unwrap();

    // independent recompute pass over the stored rollout
    let core = build_core(&cfg).unwrap();
    let (hidden, d_model) = state_dims(&cfg);
    let mut state = AgentState::from_snapshot(buf.initial_state.as_ref().unwrap(), hidden, d_model);
    let mut prev_reward = buf.initial_prev_reward;
    let mut prev_logits = buf.initial_prev_logits.clone();
    let obs_numel = cfg.frame_stack * cfg.frame_size * cfg.frame_size;
    for t in 0..cfg.unroll_length {
        let obs = Tensor::from_vec(
            buf.observation[t * obs_numel..(t + 1) * obs_numel].to_vec(),
            &[cfg.frame_stack, cfg.frame_size, cfg.frame_size],
        )
        .unwrap();
        let out =
            tape::no_grad(|| core.step(&obs, prev_reward, &prev_logits, &state)).unwrap();
        for (a, b) in out.logits.iter().zip(&buf.policy_logits[t * 3..(t + 1) * 3]) {
            assert!((a - b).abs() <= 1e-9, "step {t}: {a} vs {b}");
        }
        if buf.done[t] {
            state = core.state_init();
            prev_reward = 0.0;
            prev_logits = vec![0.0; 3];
        } else {
            state = out.state;
            prev_reward = buf.reward[t];
            prev_logits = out.logits;
        }
    }
}

#[test]
fn sequential_training_is_reproducible() {
    let cfg = tiny_config();
    let run = || {
        let (outcome, _) = run_training(&cfg, |_| {}).unwrap();
        outcome
    };
    let a = run();
    let b = run();
    assert_eq!(a.rows.len(), b.rows.len());
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        assert_eq!(ra.loss_pg.to_bits(), rb.loss_pg.to_bits());
        assert_eq!(ra.loss_baseline.to_bits(), rb.loss_baseline.to_bits());
        assert_eq!(ra.loss_entropy.to_bits(), rb.loss_entropy.to_bits());
        assert_eq!(ra.step, rb.step);
    }
    assert_eq!(a.final_version, 2);
    assert_eq!(a.steps, 60);
    assert_eq!(a.ownership_violations, 0);
}

#[test]
fn single_chunk_equals_unsplit_processing() {
    // chunk_size = T: the learner path must match a one-shot forward
    let mut cfg = tiny_config();
    cfg.chunk_size = cfg.unroll_length;
    cfg.validate().unwrap();
    let mut worker = ActorWorker::new(&cfg, 0).unwrap();
    let mut buf =
        RolloutBuffer::new(cfg.unroll_length, cfg.frame_stack * cfg.frame_size * cfg.frame_size, 3);
    let (tx, _rx) = unbounded();
    worker.fill(&mut buf, &tx).unwrap();

    let core = build_core(&cfg).unwrap();
    let (a, _) = buffer_loss(core.as_ref(), &cfg, &buf, 3).unwrap();

    let mut cfg_split = cfg.clone();
    cfg_split.chunk_size = 5;
    let (b, _) = buffer_loss(core.as_ref(), &cfg_split, &buf, 3).unwrap();
    assert!((a.item() - b.item()).abs() <= 1e-9, "{} vs {}", a.item(), b.item());
}

#[test]
fn zero_learning_rate_freezes_losses() {
    let mut cfg = tiny_config();
    cfg.learning_rate = 0.0;
    cfg.total_steps = 120;
    let (outcome, _) = run_training(&cfg, |_| {}).unwrap();
    // identical batches are not guaranteed, but parameters never move, so a
    // repeat run of the same batch sequence gives identical losses
    let (outcome2, _) = run_training(&cfg, |_| {}).unwrap();
    for (a, b) in outcome.rows.iter().zip(&outcome2.rows) {
        assert_eq!(a.loss_pg.to_bits(), b.loss_pg.to_bits());
    }
}

#[test]
fn one_update_when_batch_equals_available_work() {
    let mut cfg = tiny_config();
    cfg.batch_size = 1;
    cfg.num_buffers = 4;
    cfg.total_steps = cfg.unroll_length; // exactly one update
    let (outcome, _) = run_training(&cfg, |_| {}).unwrap();
    assert_eq!(outcome.final_version, 1);
    assert_eq!(outcome.rows.len(), 1);
}

#[test]
fn evaluate_reports_episode_means() {
    let cfg = tiny_config();
    let core = build_core(&cfg).unwrap();
    let report = evaluate(&cfg, core.as_ref(), 5).unwrap();
    assert_eq!(report.episodes, 5);
    // catch returns are ±1 per episode
    assert!(report.mean_return.abs() <= 1.0);
    assert!((report.mean_length - 10.0).abs() < 1e-9);
}
