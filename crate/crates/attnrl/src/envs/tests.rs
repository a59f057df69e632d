use super::*;
use rand::Rng;

#[test]
fn catch_episode_length_and_rewards() {
    // paddle tracker: move toward the ball column every step
    let mut env = CatchEnv::new(7);
    for _ in 0..20 {
        let _ = env.reset();
        let target = env.ball_col;
        let mut steps = 0;
        loop {
            let action = match target.cmp(&env.paddle_col) {
                std::cmp::Ordering::Less => 0,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Greater => 2,
            };
            let (_, reward, done) = env.step(action).unwrap();
            steps += 1;
            if done {
                assert_eq!(reward, 1.0, "tracker must catch");
                break;
            }
        }
        assert_eq!(steps, env.height, "episode length equals grid height");
    }
}

#[test]
fn catch_missing_paddle_scores_minus_one() {
    let mut env = CatchEnv::new(3);
    let _ = env.reset();
    let ball = env.ball_col;
    // run to the wall furthest from the ball
    let away = if ball < env.width / 2 { 2 } else { 0 };
    let mut last = (0.0, false);
    for _ in 0..env.height {
        let (_, r, d) = env.step(away).unwrap();
        last = (r, d);
        if d {
            break;
        }
    }
    assert_eq!(last, (-1.0, true));
}

#[test]
fn catch_rejects_bad_action() {
    let mut env = CatchEnv::new(0);
    assert!(env.step(3).is_err());
}

#[test]
fn catch_random_policy_return_matches_brute_force_estimate() {
    // ball column is uniform over W and independent of the paddle, so the
    // catch probability is exactly 1/W; mean return = 2/W − 1
    let mut env = CatchEnv::new(11);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let episodes = 10_000;
    let mut total = 0.0;
    for _ in 0..episodes {
        let _ = env.reset();
        loop {
            let (_, r, done) = env.step(rng.gen_range(0..3)).unwrap();
            if done {
                total += r;
                break;
            }
        }
    }
    let mean = total / episodes as f64;
    let expect = 2.0 / env.width as f64 - 1.0;
    assert!((mean - expect).abs() <= 0.05, "mean {mean} vs expected {expect}");
}

#[test]
fn minipong_wall_reflection() {
    let mut env = MiniPongEnv::with_size(16, 1);
    let _ = env.reset();
    // force the ball one step above the bottom wall moving down
    env.ball = (8, 14);
    env.velocity = (1, 1);
    env.step(1).unwrap();
    assert_eq!(env.ball.1, 15);
    env.step(1).unwrap();
    // hit row 15 then reflected upward
    assert_eq!(env.velocity.1, -1);
    assert_eq!(env.ball.1, 14);
}

#[test]
fn minipong_point_ends_episode() {
    let mut env = MiniPongEnv::with_size(16, 2);
    let _ = env.reset();
    // park the agent at the top; send the ball at the bottom-right corner
    env.ball = (13, 12);
    env.velocity = (1, 1);
    env.agent_y = 2;
    let mut done = false;
    let mut reward = 0.0;
    for _ in 0..4 {
        let (_, r, d) = env.step(0).unwrap();
        if d {
            done = d;
            reward = r;
            break;
        }
    }
    assert!(done);
    assert_eq!(reward, -1.0);
}

#[test]
fn env_streams_are_deterministic() {
    for name in ["catch", "minipong"] {
        let run = || {
            let mut env = make_env(name, 1234).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
            let mut stream = Vec::new();
            let first = env.reset();
            stream.extend(first.to_vec());
            for _ in 0..100 {
                let (f, r, d) = env.step(rng.gen_range(0..3)).unwrap();
                stream.extend(f.to_vec());
                stream.push(r);
                if d {
                    stream.extend(env.reset().to_vec());
                }
            }
            stream
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn frames_have_distinct_pixel_values() {
    let mut env = CatchEnv::new(3);
    let frame = env.reset();
    let v = frame.to_vec();
    assert!(v.contains(&BALL) && v.contains(&PADDLE));
    assert!(v.iter().all(|&x| (0.0..=255.0).contains(&x)));
}

// ── preprocessing ────────────────────────────────────────────────────

#[test]
fn single_frame_stack_is_resized_frame() {
    let mut pre = Preprocessor::new(4, 4, 1, false);
    let frame = Tensor::from_vec((0..64).map(|i| i as f64).collect(), &[8, 8]).unwrap();
    let out = pre.push(&frame).unwrap();
    assert_eq!(out.shape(), &[1, 4, 4]);
    // nearest neighbor picks every other source pixel
    assert_eq!(out.to_vec()[0], 0.0);
    assert_eq!(out.to_vec()[1], 2.0);
    assert_eq!(out.to_vec()[4], 16.0);
}

#[test]
fn rescale_flag_maps_255_to_one() {
    let mut pre = Preprocessor::new(3, 3, 2, true);
    let frame = Tensor::full(&[6, 6], 255.0);
    let out = pre.push(&frame).unwrap();
    assert!(out.to_vec().iter().all(|&v| v == 1.0));
}

#[test]
fn ring_repeat_fills_then_slides() {
    let mut pre = Preprocessor::new(2, 2, 4, false);
    let f1 = Tensor::full(&[2, 2], 1.0);
    let f2 = Tensor::full(&[2, 2], 2.0);
    let _ = pre.push(&f1).unwrap();
    let out = pre.push(&f2).unwrap();
    // oldest-first: [f1, f1, f1, f2]
    let v = out.to_vec();
    assert_eq!(&v[0..4], &[1.0; 4]);
    assert_eq!(&v[4..8], &[1.0; 4]);
    assert_eq!(&v[8..12], &[1.0; 4]);
    assert_eq!(&v[12..16], &[2.0; 4]);
}

#[test]
fn channel_order_is_oldest_to_newest() {
    let mut pre = Preprocessor::new(2, 2, 3, false);
    for tag in 1..=5 {
        let frame = Tensor::full(&[2, 2], tag as f64);
        let out = pre.push(&frame).unwrap();
        if tag >= 3 {
            let v = out.to_vec();
            assert_eq!(v[0], (tag - 2) as f64);
            assert_eq!(v[4], (tag - 1) as f64);
            assert_eq!(v[8], tag as f64);
        }
    }
}

#[test]
fn upscaling_preserves_values() {
    let mut pre = Preprocessor::new(28, 28, 1, false);
    let mut frame = vec![0.0; 80];
    frame[0] = 255.0;
    let out = pre.push(&Tensor::from_vec(frame, &[10, 8]).unwrap()).unwrap();
    let v = out.to_vec();
    // top-left source pixel expands into a block of 255s
    assert_eq!(v[0], 255.0);
    assert_eq!(v[1], 255.0);
    assert!(v.iter().filter(|&&x| x == 255.0).count() >= 4);
}
