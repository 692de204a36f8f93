//! Driving-log data model: frames + actions, the ADVL container format,
//! z-score action normalization, and history-window iteration.
//!
//! A log holds grayscale frames in `[0,1]` (shape `[H,W,1]`) and 3-component
//! actions `(acceleration, steering angle, brake)` in raw units. Alignment
//! rule: `actions[i]` is the control applied during the interval between
//! `frames[i]` and `frames[i+1]`, so a log carries either `len(frames) − 1`
//! actions or `len(frames)` with the trailing action ignored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(acceleration, steering angle, brake)`, raw or normalized depending on
/// context; functions state which they expect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionVector(pub [f32; 3]);

impl ActionVector {
    pub fn new(accel: f32, steer: f32, brake: f32) -> Self {
        ActionVector([accel, steer, brake])
    }

    pub fn zero() -> Self {
        ActionVector([0.0; 3])
    }

    pub fn accel(&self) -> f32 {
        self.0[0]
    }

    pub fn steer(&self) -> f32 {
        self.0[1]
    }

    pub fn brake(&self) -> f32 {
        self.0[2]
    }

    /// z-scores each component with the given training statistics.
    pub fn normalize(&self, stats: &NormalizationStats) -> ActionVector {
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            out[c] = ((self.0[c] as f64 - stats.mean[c]) / stats.std[c]) as f32;
        }
        ActionVector(out)
    }

    /// Inverse of [`ActionVector::normalize`].
    pub fn denormalize(&self, stats: &NormalizationStats) -> ActionVector {
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            out[c] = (self.0[c] as f64 * stats.std[c] + stats.mean[c]) as f32;
        }
        ActionVector(out)
    }
}

/// Componentwise mean and population standard deviation of the training
/// split's actions; `std` is floored at 1e-6 so normalization never divides
/// by zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizationStats {
    /// Identity stats: normalization becomes a no-op.
    pub fn identity() -> Self {
        NormalizationStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Mean and population std over every action in the given (training) logs.
pub fn compute_stats(logs: &[DrivingLog]) -> Result<NormalizationStats> {
    let n: usize = logs.iter().map(|l| l.actions.len()).sum();
    if n < 2 {
        return Err(Error::EmptyDataset(format!(
            "normalization statistics need at least 2 actions, found {n}"
        )));
    }
    let mut mean = [0.0f64; 3];
    for log in logs {
        for a in &log.actions {
            for c in 0..3 {
                mean[c] += a.0[c] as f64;
            }
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = [0.0f64; 3];
    for log in logs {
        for a in &log.actions {
            for c in 0..3 {
                let d = a.0[c] as f64 - mean[c];
                var[c] += d * d;
            }
        }
    }
    let mut std = [0.0f64; 3];
    for c in 0..3 {
        std[c] = (var[c] / n as f64).sqrt().max(1e-6);
    }
    Ok(NormalizationStats { mean, std })
}

/// A sequence of frames plus the actions taken between them.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingLog {
    pub frames: Vec<Tensor<f32>>,
    pub actions: Vec<ActionVector>,
}

impl DrivingLog {
    /// Validates frame shapes, pixel range, and frame/action alignment.
    pub fn new(frames: Vec<Tensor<f32>>, actions: Vec<ActionVector>) -> Result<Self> {
        let log = DrivingLog { frames, actions };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<()> {
        let nf = self.frames.len();
        let na = self.actions.len();
        if nf == 0 {
            return Err(Error::EmptyDataset("log has no frames".into()));
        }
        if na + 1 != nf && na != nf {
            return Err(Error::InvalidConfig(format!(
                "log has {nf} frames and {na} actions; expected {} or {nf}",
                nf - 1
            )));
        }
        let shape = self.frames[0].shape().to_vec();
        if shape.len() != 3 || shape[2] != 1 {
            return Err(Error::InvalidConfig(format!(
                "frames must be [H,W,1], got {shape:?}"
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::shapes("log frames", &shape, f.shape()));
            }
            if f.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidConfig(format!(
                    "frame {i} has pixels outside [0,1]"
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[0]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[1]
    }

    /// Number of `(history, action, target)` samples a window of size `w`
    /// yields: `len(frames) − w`, or 0 for too-short logs.
    pub fn n_windows(&self, w: usize) -> usize {
        self.frames.len().saturating_sub(w)
    }
}

const LOG_MAGIC: &[u8; 4] = b"ADVL";
const LOG_VERSION: u32 = 1;

/// Writes a log in the ADVL container format (all values little-endian).
pub fn save_log(log: &DrivingLog, path: &Path) -> Result<()> {
    log.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(LOG_MAGIC)?;
    w.write_all(&LOG_VERSION.to_le_bytes())?;
    w.write_all(&(log.frames.len() as u32).to_le_bytes())?;
    w.write_all(&(log.height() as u16).to_le_bytes())?;
    w.write_all(&(log.width() as u16).to_le_bytes())?;
    w.write_all(&(log.actions.len() as u32).to_le_bytes())?;
    for frame in &log.frames {
        for &px in frame.data() {
            w.write_all(&px.to_le_bytes())?;
        }
    }
    for a in &log.actions {
        for &c in &a.0 {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

/// Reads and validates an ADVL log file.
pub fn load_log(path: &Path) -> Result<DrivingLog> {
    let file = File::open(path)?;
    let actual_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or_format(&mut r, &mut magic, "magic")?;
    if &magic != LOG_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {LOG_MAGIC:?}"
        )));
    }
    let mut u32b = [0u8; 4];
    let mut u16b = [0u8; 2];
    read_exact_or_format(&mut r, &mut u32b, "version")?;
    let version = u32::from_le_bytes(u32b);
    if version != LOG_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {LOG_VERSION}"
        )));
    }
    read_exact_or_format(&mut r, &mut u32b, "frame count")?;
    let n_frames = u32::from_le_bytes(u32b) as usize;
    read_exact_or_format(&mut r, &mut u16b, "height")?;
    let height = u16::from_le_bytes(u16b) as usize;
    read_exact_or_format(&mut r, &mut u16b, "width")?;
    let width = u16::from_le_bytes(u16b) as usize;
    read_exact_or_format(&mut r, &mut u32b, "action count")?;
    let n_actions = u32::from_le_bytes(u32b) as usize;

    let header = 4 + 4 + 4 + 2 + 2 + 4u64;
    let expected = header + (n_frames * height * width * 4) as u64 + (n_actions * 12) as u64;
    if actual_len != expected {
        return Err(Error::Format(format!(
            "file length mismatch: expected {expected} bytes, found {actual_len}"
        )));
    }

    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![0u8; height * width * 4];
    for i in 0..n_frames {
        read_exact_or_format(&mut r, &mut buf, &format!("frame {i}"))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        frames.push(Tensor::from_vec(&[height, width, 1], data)?);
    }
    let mut actions = Vec::with_capacity(n_actions);
    let mut abuf = [0u8; 12];
    for i in 0..n_actions {
        read_exact_or_format(&mut r, &mut abuf, &format!("action {i}"))?;
        actions.push(ActionVector([
            f32::from_le_bytes([abuf[0], abuf[1], abuf[2], abuf[3]]),
            f32::from_le_bytes([abuf[4], abuf[5], abuf[6], abuf[7]]),
            f32::from_le_bytes([abuf[8], abuf[9], abuf[10], abuf[11]]),
        ]));
    }
    DrivingLog::new(frames, actions)
}

/// The last `W` frames stacked channel-wise, oldest first: shape `[H,W,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow(Tensor<f32>);

impl HistoryWindow {
    /// Stacks frames (each `[H,W,1]`) oldest-first into the channel axis.
    pub fn from_frames(frames: &[&Tensor<f32>]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyDataset("history window needs ≥ 1 frame".into()));
        }
        let (h, w) = (frames[0].shape()[0], frames[0].shape()[1]);
        for f in frames {
            if f.shape() != [h, w, 1] {
                return Err(Error::shapes("history window", &[h, w, 1], f.shape()));
            }
        }
        let n = frames.len();
        let mut out = Tensor::zeros(&[h, w, n]);
        for px in 0..h * w {
            for (c, f) in frames.iter().enumerate() {
                out.data_mut()[px * n + c] = f.data()[px];
            }
        }
        Ok(HistoryWindow(out))
    }

    pub fn frame_count(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn as_tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    /// The newest frame as a standalone `[H,W,1]` tensor.
    pub fn last_frame(&self) -> Tensor<f32> {
        let (h, w, n) = (self.0.shape()[0], self.0.shape()[1], self.0.shape()[2]);
        Tensor::from_fn(&[h, w, 1], |px| self.0.data()[px * n + (n - 1)])
    }

    /// Drops the oldest frame and appends `frame` as the newest.
    pub fn push_frame(&self, frame: &Tensor<f32>) -> Result<HistoryWindow> {
        let (h, w, n) = (self.0.shape()[0], self.0.shape()[1], self.0.shape()[2]);
        if frame.shape() != [h, w, 1] {
            return Err(Error::shapes("push_frame", &[h, w, 1], frame.shape()));
        }
        let mut out = Tensor::zeros(&[h, w, n]);
        for px in 0..h * w {
            for c in 0..n - 1 {
                out.data_mut()[px * n + c] = self.0.data()[px * n + c + 1];
            }
            out.data_mut()[px * n + n - 1] = frame.data()[px];
        }
        Ok(HistoryWindow(out))
    }
}

/// One training/evaluation sample: `W` stacked history frames, the normalized
/// action taken after the newest of them, and the frame that followed.
#[derive(Debug, Clone)]
pub struct WindowedSample {
    pub history: HistoryWindow,
    pub action: ActionVector,
    pub target: Tensor<f32>,
}

/// Iterates the `len(frames) − w` windowed samples of a log, oldest history
/// frame first; actions are normalized with `stats`. Too-short logs yield an
/// empty iterator (with a logged warning), not an error.
pub fn windows<'a>(
    log: &'a DrivingLog,
    w: usize,
    stats: &'a NormalizationStats,
) -> impl Iterator<Item = WindowedSample> + 'a {
    let n = log.n_windows(w);
    if n == 0 {
        log::warn!(
            "log with {} frames is too short for window size {w}; yielding no samples",
            log.frames.len()
        );
    }
    // sample t: history = frames[t−w+1 ..= t], action = actions[t], target = frames[t+1]
    (0..n).map(move |i| {
        let t = w - 1 + i;
        let stack: Vec<&Tensor<f32>> = log.frames[t + 1 - w..=t].iter().collect();
        WindowedSample {
            history: HistoryWindow::from_frames(&stack).expect("validated log"),
            action: log.actions[t].normalize(stats),
            target: log.frames[t + 1].clone(),
        }
    })
}

/// Converter helpers for adapting external RGB data to the log format.
pub mod convert {
    use super::*;

    /// ITU-R 601 luminance of an `[H,W,3]` RGB frame, as `[H,W,1]`.
    pub fn luminance(rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
        if rgb.rank() != 3 || rgb.shape()[2] != 3 {
            return Err(Error::InvalidConfig(format!(
                "luminance expects [H,W,3], got {:?}",
                rgb.shape()
            )));
        }
        let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
        Ok(Tensor::from_fn(&[h, w, 1], |px| {
            let p = &rgb.data()[px * 3..px * 3 + 3];
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        }))
    }

    /// Area-averaging resize of an `[H,W,1]` frame; each output pixel is the
    /// mean of the exact (fractional) source rectangle it covers.
    pub fn resize_area(frame: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
        if frame.rank() != 3 || frame.shape()[2] != 1 {
            return Err(Error::InvalidConfig(format!(
                "resize_area expects [H,W,1], got {:?}",
                frame.shape()
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidConfig("resize target must be nonzero".into()));
        }
        let (in_h, in_w) = (frame.shape()[0], frame.shape()[1]);
        let (ry, rx) = (in_h as f64 / out_h as f64, in_w as f64 / out_w as f64);
        let mut out = Tensor::zeros(&[out_h, out_w, 1]);
        for oy in 0..out_h {
            let (y0, y1) = (oy as f64 * ry, (oy + 1) as f64 * ry);
            for ox in 0..out_w {
                let (x0, x1) = (ox as f64 * rx, (ox + 1) as f64 * rx);
                let mut acc = 0.0f64;
                let mut area = 0.0f64;
                let mut sy = y0.floor() as usize;
                while (sy as f64) < y1 && sy < in_h {
                    let hy = (y1.min((sy + 1) as f64) - y0.max(sy as f64)).max(0.0);
                    let mut sx = x0.floor() as usize;
                    while (sx as f64) < x1 && sx < in_w {
                        let wx = (x1.min((sx + 1) as f64) - x0.max(sx as f64)).max(0.0);
                        acc += frame.at3(sy, sx, 0) as f64 * hy * wx;
                        area += hy * wx;
                        sx += 1;
                    }
                    sy += 1;
                }
                let idx = out.idx3(oy, ox, 0);
                out.data_mut()[idx] = (acc / area) as f32;
            }
        }
        Ok(out)
    }
}
