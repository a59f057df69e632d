//! Training metrics: moving-average episode windows, SPS, the metrics CSV
//! row format, and the normalized-trapezoid AUC of a return curve.

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,episodes,mean_return_100,mean_length_100,sps,loss_pg,loss_baseline,loss_entropy,parameter_count,inference_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_length: f64,
    pub sps: f64,
    pub loss_pg: f64,
    pub loss_baseline: f64,
    pub loss_entropy: f64,
    pub parameter_count: usize,
    pub inference_ms: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episodes,
            self.mean_return,
            self.mean_length,
            self.sps,
            self.loss_pg,
            self.loss_baseline,
            self.loss_entropy,
            self.parameter_count,
            self.inference_ms
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<MetricsRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Contract(format!(
                "metrics row has {} fields, expected 10",
                fields.len()
            )));
        }
        let num =
            |i: usize| -> Result<f64> { fields[i].parse().map_err(|_| Error::Contract(format!("bad field `{}`", fields[i]))) };
        Ok(MetricsRow {
            step: num(0)? as usize,
            episodes: num(1)? as usize,
            mean_return: num(2)?,
            mean_length: num(3)?,
            sps: num(4)?,
            loss_pg: num(5)?,
            loss_baseline: num(6)?,
            loss_entropy: num(7)?,
            parameter_count: num(8)? as usize,
            inference_ms: num(9)?,
        })
    }
}

/// Ring of the last K episode (return, length) pairs; means run over
/// whatever exists until the window fills.
pub struct EpisodeWindow {
    cap: usize,
    returns: Vec<f64>,
    lengths: Vec<f64>,
    pub episodes: usize,
    next: usize,
}

impl EpisodeWindow {
    pub fn new(cap: usize) -> EpisodeWindow {
        assert!(cap >= 1);
        EpisodeWindow { cap, returns: Vec::new(), lengths: Vec::new(), episodes: 0, next: 0 }
    }

    pub fn push(&mut self, episode_return: f64, episode_length: usize) {
        if self.returns.len() < self.cap {
            self.returns.push(episode_return);
            self.lengths.push(episode_length as f64);
        } else {
            self.returns[self.next] = episode_return;
            self.lengths[self.next] = episode_length as f64;
        }
        self.next = (self.next + 1) % self.cap;
        self.episodes += 1;
    }

    pub fn mean_return(&self) -> f64 {
        if self.returns.is_empty() {
            0.0
        } else {
            self.returns.iter().sum::<f64>() / self.returns.len() as f64
        }
    }

    pub fn mean_length(&self) -> f64 {
        if self.lengths.is_empty() {
            0.0
        } else {
            self.lengths.iter().sum::<f64>() / self.lengths.len() as f64
        }
    }
}

/// SPS = total_steps / training_time.
pub fn sps(total_steps: usize, elapsed_secs: f64) -> f64 {
    if elapsed_secs > 0.0 {
        total_steps as f64 / elapsed_secs
    } else {
        0.0
    }
}

/// Step-weighted average of the return curve: the trapezoidal integral over
/// steps divided by the step span.
pub fn auc(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::Contract(format!(
            "auc needs at least 2 points, got {}",
            curve.len()
        )));
    }
    let span = curve[curve.len() - 1].0 - curve[0].0;
    if span <= 0.0 {
        return Err(Error::Contract("auc needs strictly increasing steps".into()));
    }
    let mut integral = 0.0;
    for pair in curve.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        integral += 0.5 * (y0 + y1) * (x1 - x0);
    }
    Ok(integral / span)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_exact() {
        assert_eq!(
            CSV_HEADER,
            "step,episodes,mean_return_100,mean_length_100,sps,loss_pg,loss_baseline,loss_entropy,parameter_count,inference_ms"
        );
    }

    #[test]
    fn rows_round_trip_losslessly() {
        let row = MetricsRow {
            step: 960,
            episodes: 17,
            mean_return: -0.333333333333333314,
            mean_length: 10.0,
            sps: 1234.567,
            loss_pg: 0.1,
            loss_baseline: 2.25,
            loss_entropy: -1.0986122886681098,
            parameter_count: 120_001,
            inference_ms: 3.5,
        };
        let parsed = MetricsRow::parse_csv_line(&row.to_csv_line()).unwrap();
        assert_eq!(parsed, row);
    }

    #[test]
    fn window_means() {
        let mut w = EpisodeWindow::new(100);
        for _ in 0..3 {
            w.push(1.0, 10);
        }
        assert_eq!(w.mean_return(), 1.0);

        let mut w = EpisodeWindow::new(2);
        let mut means = Vec::new();
        for r in [1.0, 3.0, 5.0] {
            w.push(r, 1);
            means.push(w.mean_return());
        }
        assert_eq!(means, vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn sps_definition() {
        assert_eq!(sps(1000, 2.0), 500.0);
    }

    #[test]
    fn auc_constant_and_ramp() {
        let c = vec![(0.0, 3.0), (10.0, 3.0)];
        assert!((auc(&c).unwrap() - 3.0).abs() < 1e-12);

        let ramp = vec![(0.0, 0.0), (100.0, 10.0)];
        assert!((auc(&ramp).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn auc_hand_trapezoid() {
        let curve = vec![(0.0, 0.0), (1.0, 2.0), (3.0, 2.0)];
        assert!((auc(&curve).unwrap() - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn auc_needs_two_points() {
        assert!(auc(&[(0.0, 1.0)]).is_err());
    }
}
