//! Deterministic toy environments (Catch and MiniPong) plus the frame
//! preprocessing pipeline: grayscale frames in [0,255], nearest-neighbor
//! resize, and channel-stacking of the last m frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BG: f64 = 0.0;
const PADDLE: f64 = 128.0;
const BALL: f64 = 255.0;

pub trait Environment {
    fn num_actions(&self) -> usize;
    /// Native (H, W) of rendered frames.
    fn frame_shape(&self) -> (usize, usize);
    /// Start a new episode and render the first observation.
    fn reset(&mut self) -> Tensor;
    /// Apply an action; returns (frame, reward, done).
    fn step(&mut self, action: usize) -> Result<(Tensor, f64, bool)>;
}

// ── Catch ────────────────────────────────────────────────────────────

/// A ball falls straight down a H×W grid; the paddle on the bottom row moves
/// left/stay/right. Catching scores +1, missing −1. Episode length is
/// exactly the grid height.
pub struct CatchEnv {
    pub height: usize,
    pub width: usize,
    ball_col: usize,
    ball_row: usize,
    paddle_col: usize,
    rng: ChaCha8Rng,
}

impl CatchEnv {
    pub fn new(seed: u64) -> CatchEnv {
        CatchEnv::with_size(10, 8, seed)
    }

    pub fn with_size(height: usize, width: usize, seed: u64) -> CatchEnv {
        let mut env = CatchEnv {
            height,
            width,
            ball_col: 0,
            ball_row: 0,
            paddle_col: width / 2,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.new_episode();
        env
    }

    fn new_episode(&mut self) {
        self.ball_col = self.rng.gen_range(0..self.width);
        self.ball_row = 0;
        self.paddle_col = self.width / 2;
    }

    fn render(&self) -> Tensor {
        let mut data = vec![BG; self.height * self.width];
        data[(self.height - 1) * self.width + self.paddle_col] = PADDLE;
        if self.ball_row < self.height {
            data[self.ball_row * self.width + self.ball_col] = BALL;
        }
        Tensor::from_vec(data, &[self.height, self.width]).expect("frame shape")
    }
}

impl Environment for CatchEnv {
    fn num_actions(&self) -> usize {
        3 // left, stay, right
    }

    fn frame_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn reset(&mut self) -> Tensor {
        self.new_episode();
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<(Tensor, f64, bool)> {
        match action {
            0 => self.paddle_col = self.paddle_col.saturating_sub(1),
            1 => {}
            2 => self.paddle_col = (self.paddle_col + 1).min(self.width - 1),
            _ => return Err(Error::Env(format!("catch action {action} out of range 0..3"))),
        }
        self.ball_row += 1;
        if self.ball_row >= self.height {
            let reward = if self.paddle_col == self.ball_col { 1.0 } else { -1.0 };
            Ok((self.render(), reward, true))
        } else {
            Ok((self.render(), 0.0, false))
        }
    }
}

// ── MiniPong ─────────────────────────────────────────────────────────

/// Minimal Pong on a square grid: the agent paddle sits on the right edge,
/// a scripted opponent (moves toward the ball every other step) on the left.
/// The ball reflects off the top/bottom walls and paddles; the episode ends
/// at the first point with reward ±1.
pub struct MiniPongEnv {
    pub size: usize,
    ball: (i32, i32),     // (x col, y row)
    velocity: (i32, i32), // components in {-1, +1}
    agent_y: i32,
    opponent_y: i32,
    steps: usize,
    rng: ChaCha8Rng,
}

const PADDLE_HALF: i32 = 1; // paddles cover 3 rows

impl MiniPongEnv {
    pub fn new(seed: u64) -> MiniPongEnv {
        MiniPongEnv::with_size(16, seed)
    }

    pub fn with_size(size: usize, seed: u64) -> MiniPongEnv {
        let mut env = MiniPongEnv {
            size,
            ball: (0, 0),
            velocity: (1, 1),
            agent_y: 0,
            opponent_y: 0,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.new_episode();
        env
    }

    fn new_episode(&mut self) {
        let mid = (self.size / 2) as i32;
        self.ball = (mid, mid);
        self.velocity = (
            if self.rng.gen_bool(0.5) { 1 } else { -1 },
            if self.rng.gen_bool(0.5) { 1 } else { -1 },
        );
        self.agent_y = mid;
        self.opponent_y = mid;
        self.steps = 0;
    }

    fn covers(paddle_y: i32, y: i32) -> bool {
        (y - paddle_y).abs() <= PADDLE_HALF
    }

    fn render(&self) -> Tensor {
        let n = self.size;
        let mut data = vec![BG; n * n];
        let clamp = |v: i32| v.clamp(0, n as i32 - 1) as usize;
        for dy in -PADDLE_HALF..=PADDLE_HALF {
            data[clamp(self.opponent_y + dy) * n] = PADDLE;
            data[clamp(self.agent_y + dy) * n + (n - 1)] = PADDLE;
        }
        data[clamp(self.ball.1) * n + clamp(self.ball.0)] = BALL;
        Tensor::from_vec(data, &[n, n]).expect("frame shape")
    }
}

impl Environment for MiniPongEnv {
    fn num_actions(&self) -> usize {
        3 // up, stay, down
    }

    fn frame_shape(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    fn reset(&mut self) -> Tensor {
        self.new_episode();
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<(Tensor, f64, bool)> {
        let limit = self.size as i32 - 1;
        match action {
            0 => self.agent_y = (self.agent_y - 1).max(PADDLE_HALF),
            1 => {}
            2 => self.agent_y = (self.agent_y + 1).min(limit - PADDLE_HALF),
            _ => return Err(Error::Env(format!("minipong action {action} out of range 0..3"))),
        }
        // scripted opponent tracks the ball at half speed
        if self.steps % 2 == 0 {
            let target = self.ball.1;
            if target > self.opponent_y {
                self.opponent_y = (self.opponent_y + 1).min(limit - PADDLE_HALF);
            } else if target < self.opponent_y {
                self.opponent_y = (self.opponent_y - 1).max(PADDLE_HALF);
            }
        }
        self.steps += 1;

        // wall reflection
        if self.ball.1 + self.velocity.1 < 0 || self.ball.1 + self.velocity.1 > limit {
            self.velocity.1 = -self.velocity.1;
        }
        self.ball.1 += self.velocity.1;

        // paddle reflection or point
        let next_x = self.ball.0 + self.velocity.0;
        if next_x >= limit {
            if Self::covers(self.agent_y, self.ball.1) {
                self.velocity.0 = -self.velocity.0;
                self.ball.0 += self.velocity.0;
            } else {
                self.ball.0 = limit;
                return Ok((self.render(), -1.0, true));
            }
        } else if next_x <= 0 {
            if Self::covers(self.opponent_y, self.ball.1) {
                self.velocity.0 = -self.velocity.0;
                self.ball.0 += self.velocity.0;
            } else {
                self.ball.0 = 0;
                return Ok((self.render(), 1.0, true));
            }
        } else {
            self.ball.0 = next_x;
        }
        Ok((self.render(), 0.0, false))
    }
}

pub fn make_env(name: &str, seed: u64) -> Result<Box<dyn Environment>> {
    match name {
        "catch" => Ok(Box::new(CatchEnv::new(seed))),
        "minipong" => Ok(Box::new(MiniPongEnv::new(seed))),
        other => Err(Error::config("env", format!("unknown environment `{other}`"))),
    }
}

// ── Preprocessing ────────────────────────────────────────────────────

/// Nearest-neighbor downsize to (h_p, w_p), ring of the last m frames
/// stacked along the channel dimension oldest-first. The ring starts by
/// repeating the first frame. Values stay in [0,255] unless `rescale`
/// divides them into [0,1].
pub struct Preprocessor {
    pub h: usize,
    pub w: usize,
    pub stack: usize,
    pub rescale: bool,
    ring: Vec<Vec<f64>>,
}

impl Preprocessor {
    pub fn new(h: usize, w: usize, stack: usize, rescale: bool) -> Preprocessor {
        assert!(stack >= 1, "frame stack must be at least 1");
        Preprocessor { h, w, stack, rescale, ring: Vec::new() }
    }

    /// Forget the ring; the next frame repeat-fills it (episode start).
    pub fn clear(&mut self) {
        self.ring.clear();
    }

    fn resize(&self, frame: &Tensor) -> Vec<f64> {
        let (src_h, src_w) = (frame.shape()[0], frame.shape()[1]);
        let data = frame.data();
        let mut out = vec![0.0; self.h * self.w];
        for i in 0..self.h {
            let si = i * src_h / self.h;
            for j in 0..self.w {
                let sj = j * src_w / self.w;
                out[i * self.w + j] = data[si * src_w + sj];
            }
        }
        out
    }

    /// The stack that `push` would have produced had `frame` replaced the
    /// newest ring entry; the ring itself is untouched. Used by saliency
    /// probes that re-evaluate the policy on perturbed frames.
    pub fn stack_replacing_newest(&self, frame: &Tensor) -> Result<Tensor> {
        if self.ring.is_empty() {
            return Err(Error::Contract("preprocessor ring is empty".into()));
        }
        let resized = self.resize(frame);
        let scale = if self.rescale { 1.0 / 255.0 } else { 1.0 };
        let mut data = Vec::with_capacity(self.stack * self.h * self.w);
        for old in &self.ring[..self.ring.len() - 1] {
            data.extend(old.iter().map(|&v| v * scale));
        }
        data.extend(resized.iter().map(|&v| v * scale));
        Tensor::from_vec(data, &[self.stack, self.h, self.w])
    }

    /// Push a raw [H×W] frame, emit the [m×h_p×w_p] stack.
    pub fn push(&mut self, frame: &Tensor) -> Result<Tensor> {
        if frame.shape().len() != 2 {
            return Err(Error::shape(
                "preprocess",
                format!("expected [H, W] frame, got {:?}", frame.shape()),
            ));
        }
        let resized = self.resize(frame);
        if self.ring.is_empty() {
            self.ring = vec![resized; self.stack];
        } else {
            self.ring.remove(0);
            self.ring.push(resized);
        }
        let scale = if self.rescale { 1.0 / 255.0 } else { 1.0 };
        let mut data = Vec::with_capacity(self.stack * self.h * self.w);
        for frame in &self.ring {
            data.extend(frame.iter().map(|&v| v * scale));
        }
        Tensor::from_vec(data, &[self.stack, self.h, self.w])
    }
}

#[cfg(test)]
mod tests;
