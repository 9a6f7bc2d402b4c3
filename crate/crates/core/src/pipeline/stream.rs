use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc::sync_channel;

use crate::error::{Error, Result};
use crate::hpstm::HpstmModel;
use crate::kinematics::{vec3, PoseSequence, Vec3};
use crate::retarget::{ArmJoints, RetargetConfig, Retargeter, RobotCommand};

/// Added to every covariance trace before inversion.
pub const FUSION_EPS: f64 = 1e-9;

/// One window's estimate of a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEstimate {
    pub joints: Vec<Vec3<f64>>,
    /// per-joint covariance traces; `None` gives unit weights
    pub traces: Option<Vec<f64>>,
}

impl FrameEstimate {
    fn weight(&self, joint: usize) -> f64 {
        self.traces.as_ref().map_or(1.0, |t| 1.0 / (t[joint] + FUSION_EPS))
    }
}

/// Normalized inverse-trace weights of several estimates of one joint.
pub fn fusion_weights(traces: &[Option<f64>]) -> Vec<f64> {
    let raw: Vec<f64> = traces.iter().map(|t| t.map_or(1.0, |t| 1.0 / (t + FUSION_EPS))).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Variance-weighted fusion of overlapping estimates of one frame. The root
/// (joint 0) and the root-relative offsets of the other joints are averaged
/// separately, each joint with its own weights, and the fused root is added back.
pub fn fuse_windows(estimates: &[FrameEstimate]) -> Result<Vec<Vec3<f64>>> {
    let Some(first) = estimates.first() else {
        return Err(Error::Missing("fuse_windows needs at least one estimate".into()));
    };
    let joints = first.joints.len();
    if estimates.iter().any(|e| e.joints.len() != joints || e.traces.as_ref().is_some_and(|t| t.len() != joints)) {
        return Err(Error::Shape {
            op: "fuse_windows",
            detail: "estimates disagree on the joint count".into(),
        });
    }
    if estimates.len() == 1 {
        return Ok(first.joints.clone());
    }
    let mut out = Vec::with_capacity(joints);
    let mut root = [0.0; 3];
    for j in 0..joints {
        let (mut acc, mut wsum) = ([0.0; 3], 0.0);
        for e in estimates {
            let w = e.weight(j);
            let p = if j == 0 { e.joints[0] } else { vec3::sub(e.joints[j], e.joints[0]) };
            acc = vec3::add(acc, vec3::scale(p, w));
            wsum += w;
        }
        let fused = vec3::scale(acc, 1.0 / wsum);
        if j == 0 {
            root = fused;
            out.push(fused);
        } else {
            out.push(vec3::add(root, fused));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFrame {
    pub index: usize,
    pub joints: Vec<Vec3<f64>>,
    /// input frames received after this one before it was emitted
    pub latency: usize,
    /// emitted by `finish` rather than by a regular inference
    pub flushed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamConfig {
    pub stride: usize,
    /// weight overlaps by predicted covariance when the model has the head
    pub use_covariance: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { stride: 5, use_covariance: true }
    }
}

fn check_stride(stride: usize, window: usize) -> Result<()> {
    if stride == 0 || stride > window {
        return Err(Error::Config(format!("stride must lie in 1..={window}, got {stride}")));
    }
    Ok(())
}

fn estimate_window(model: &HpstmModel, window: &PoseSequence<f64>, use_cov: bool) -> Result<Vec<FrameEstimate>> {
    let out = model.forward(window, use_cov)?;
    Ok((0..window.frames())
        .map(|t| FrameEstimate {
            joints: out.positions.frame(t),
            traces: out.cov.as_ref().map(|c| (0..window.joints()).map(|j| c.trace(t, j)).collect()),
        })
        .collect())
}

/// Sliding-window smoother fed one frame at a time.
///
/// The model runs once the buffer holds a full window and then every `stride`
/// frames. A frame is emitted as soon as no later window can cover it; `finish`
/// runs one extra window ending at the last frame if it was not yet covered and
/// flushes everything.
pub struct StreamState<'m> {
    model: &'m HpstmModel,
    stride: usize,
    use_cov: bool,
    buffer: VecDeque<Vec<Vec3<f64>>>,
    received: usize,
    next_end: usize,
    last_end: Option<usize>,
    pending: BTreeMap<usize, Vec<FrameEstimate>>,
    next_emit: usize,
    windows_run: usize,
}

impl<'m> StreamState<'m> {
    pub fn new(model: &'m HpstmModel, config: StreamConfig) -> Result<Self> {
        let w = model.config().window;
        check_stride(config.stride, w)?;
        Ok(Self {
            model,
            stride: config.stride,
            use_cov: config.use_covariance && model.config().covariance_head,
            buffer: VecDeque::with_capacity(w),
            received: 0,
            next_end: w - 1,
            last_end: None,
            pending: BTreeMap::new(),
            next_emit: 0,
            windows_run: 0,
        })
    }

    pub fn window(&self) -> usize {
        self.model.config().window
    }

    pub fn received(&self) -> usize {
        self.received
    }

    pub fn windows_run(&self) -> usize {
        self.windows_run
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    fn run_window(&mut self) -> Result<()> {
        let w = self.window();
        let end = self.received - 1;
        let frames: Vec<Vec<Vec3<f64>>> = self.buffer.iter().cloned().collect();
        let est = estimate_window(self.model, &PoseSequence::from_frames(&frames)?, self.use_cov)?;
        for (k, e) in est.into_iter().enumerate() {
            self.pending.entry(end + 1 - w + k).or_default().push(e);
        }
        self.last_end = Some(end);
        self.windows_run += 1;
        Ok(())
    }

    fn emit_before(&mut self, limit: usize, flushed: bool) -> Result<Vec<EmittedFrame>> {
        let mut out = Vec::new();
        while self.next_emit < limit {
            let Some(est) = self.pending.remove(&self.next_emit) else { break };
            out.push(EmittedFrame {
                index: self.next_emit,
                joints: fuse_windows(&est)?,
                latency: self.received - 1 - self.next_emit,
                flushed,
            });
            self.next_emit += 1;
        }
        Ok(out)
    }

    pub fn push(&mut self, frame: &[Vec3<f64>]) -> Result<Vec<EmittedFrame>> {
        if frame.len() != self.model.config().joints {
            return Err(Error::Shape {
                op: "stream_step",
                detail: format!("frame has {} joints, model expects {}", frame.len(), self.model.config().joints),
            });
        }
        let w = self.window();
        self.buffer.push_back(frame.to_vec());
        if self.buffer.len() > w {
            self.buffer.pop_front();
        }
        self.received += 1;
        if self.received - 1 == self.next_end {
            self.run_window()?;
            self.next_end += self.stride;
            return self.emit_before(self.next_end + 1 - w, false);
        }
        Ok(Vec::new())
    }

    pub fn finish(&mut self) -> Result<Vec<EmittedFrame>> {
        if self.received == 0 {
            return Ok(Vec::new());
        }
        if self.received < self.window() {
            return Err(Error::TooShort {
                what: "stream",
                needed: self.window(),
                got: self.received,
            });
        }
        if self.last_end != Some(self.received - 1) {
            self.run_window()?;
        }
        self.emit_before(usize::MAX, true)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub stream: StreamConfig,
    pub fps: f64,
    pub retarget: Option<(RetargetConfig, ArmJoints)>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            fps: 30.0,
            retarget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub smoothed: PoseSequence<f64>,
    pub commands: Option<Vec<RobotCommand>>,
    pub windows_run: usize,
    /// largest emission delay in input frames, over frames not flushed at the end
    pub max_latency: usize,
}

fn window_ends(frames: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut ends: Vec<usize> = (window - 1..frames).step_by(stride).collect();
    if ends.last() != Some(&(frames - 1)) {
        ends.push(frames - 1);
    }
    ends
}

fn commands_for(smoothed: &PoseSequence<f64>, opts: &PipelineOptions) -> Result<Option<Vec<RobotCommand>>> {
    let Some((cfg, arm)) = &opts.retarget else { return Ok(None) };
    let mut r = Retargeter::new(cfg.clone())?;
    let mut out = Vec::new();
    for t in 0..smoothed.frames() {
        out.extend(r.push(&arm.triple(smoothed, t), t as f64 / opts.fps)?);
    }
    Ok(Some(out))
}

/// Whole-sequence smoothing with the same windows and fusion order as
/// [`StreamState`], so the result is bit-identical to streaming.
pub fn run_offline(seq: &PoseSequence<f64>, model: &HpstmModel, opts: &PipelineOptions) -> Result<PipelineOutput> {
    let w = model.config().window;
    check_stride(opts.stream.stride, w)?;
    if seq.frames() < w {
        return Err(Error::TooShort { what: "run_offline", needed: w, got: seq.frames() });
    }
    let use_cov = opts.stream.use_covariance && model.config().covariance_head;
    let ends = window_ends(seq.frames(), w, opts.stream.stride);
    let mut pending: Vec<Vec<FrameEstimate>> = vec![Vec::new(); seq.frames()];
    // frames below this were already emitted when the closing window runs
    let mut emitted = 0;
    for &end in &ends {
        let start = end + 1 - w;
        for (k, e) in estimate_window(model, &seq.window(start, w)?, use_cov)?.into_iter().enumerate() {
            if start + k >= emitted {
                pending[start + k].push(e);
            }
        }
        emitted = end + opts.stream.stride + 1 - w;
    }
    let frames = pending.iter().map(|e| fuse_windows(e)).collect::<Result<Vec<_>>>()?;
    let smoothed = PoseSequence::from_frames(&frames)?;
    // emission time of each frame in the streaming schedule
    let mut max_latency = 0;
    let mut f = 0;
    for (i, &end) in ends.iter().enumerate() {
        let is_flush = i + 1 == ends.len() && (end + 1 - w) % opts.stream.stride != 0;
        if is_flush {
            break;
        }
        let limit = end + opts.stream.stride + 1 - w;
        while f < limit.min(seq.frames()) {
            max_latency = max_latency.max(end - f);
            f += 1;
        }
    }
    Ok(PipelineOutput {
        commands: commands_for(&smoothed, opts)?,
        smoothed,
        windows_run: ends.len(),
        max_latency,
    })
}

fn collect(frames: usize, emitted: Vec<EmittedFrame>, windows_run: usize, opts: &PipelineOptions) -> Result<PipelineOutput> {
    if emitted.len() != frames || emitted.iter().enumerate().any(|(i, e)| e.index != i) {
        return Err(Error::Shape { op: "stream", detail: "frames emitted out of order".into() });
    }
    let max_latency = emitted
        .iter()
        .filter(|e| !e.flushed)
        .map(|e| e.latency)
        .max()
        .unwrap_or(0);
    let smoothed = PoseSequence::from_frames(&emitted.into_iter().map(|e| e.joints).collect::<Vec<_>>())?;
    Ok(PipelineOutput {
        commands: commands_for(&smoothed, opts)?,
        smoothed,
        windows_run,
        max_latency,
    })
}

/// Single-threaded streaming run over a whole sequence.
pub fn run_streaming(seq: &PoseSequence<f64>, model: &HpstmModel, opts: &PipelineOptions) -> Result<PipelineOutput> {
    let mut st = StreamState::new(model, opts.stream)?;
    let mut emitted = Vec::with_capacity(seq.frames());
    for t in 0..seq.frames() {
        emitted.extend(st.push(&seq.frame(t))?);
    }
    emitted.extend(st.finish()?);
    collect(seq.frames(), emitted, st.windows_run(), opts)
}

/// Ingest, inference and emission on three threads joined by bounded queues.
/// The inference worker owns the only [`StreamState`], so results equal
/// [`run_streaming`].
pub fn run_threaded(
    seq: &PoseSequence<f64>,
    model: &HpstmModel,
    opts: &PipelineOptions,
    queue: usize,
) -> Result<PipelineOutput> {
    let queue = queue.max(1);
    let mut st = StreamState::new(model, opts.stream)?;
    let (frame_tx, frame_rx) = sync_channel::<Vec<Vec3<f64>>>(queue);
    let (out_tx, out_rx) = sync_channel::<Result<EmittedFrame>>(queue);
    std::thread::scope(|s| {
        s.spawn(move || {
            for t in 0..seq.frames() {
                if frame_tx.send(seq.frame(t)).is_err() {
                    break;
                }
            }
        });
        let worker = s.spawn(move || {
            let run = || -> Result<()> {
                for frame in frame_rx {
                    for e in st.push(&frame)? {
                        let _ = out_tx.send(Ok(e));
                    }
                }
                for e in st.finish()? {
                    let _ = out_tx.send(Ok(e));
                }
                Ok(())
            };
            if let Err(e) = run() {
                let _ = out_tx.send(Err(e));
            }
            st.windows_run()
        });
        let emitted: Result<Vec<EmittedFrame>> = out_rx.into_iter().collect();
        let windows_run = worker.join().expect("inference worker panicked");
        collect(seq.frames(), emitted?, windows_run, opts)
    })
}

/// True when `ESFP_THREADS=1` asks for the single-threaded deterministic mode.
pub fn single_threaded_requested() -> bool {
    std::env::var("ESFP_THREADS").is_ok_and(|v| v.trim() == "1")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hpstm::ModelConfig;
    use crate::kinematics::SkeletonDefinition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(cov: bool) -> HpstmModel {
        let cfg = ModelConfig {
            window: 7,
            d_model: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_width: 16,
            covariance_head: cov,
            ..ModelConfig::desk()
        };
        HpstmModel::new(cfg, SkeletonDefinition::smpl24(), 3).unwrap()
    }

    fn random_seq(frames: usize, seed: u64) -> PoseSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * 24 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        PoseSequence::new(frames, 24, data).unwrap()
    }

    fn est(joints: Vec<Vec3<f64>>, trace: Option<f64>) -> FrameEstimate {
        let n = joints.len();
        FrameEstimate { joints, traces: trace.map(|t| vec![t; n]) }
    }

    #[test]
    fn fusion_examples() {
        let a = est(vec![[1.0, 2.0, 3.0], [2.0, 2.0, 2.0]], Some(0.5));
        assert_eq!(fuse_windows(std::slice::from_ref(&a)).unwrap(), a.joints);
        let b = est(vec![[3.0, 0.0, 1.0], [5.0, 1.0, 0.0]], Some(0.5));
        let m = fuse_windows(&[a.clone(), b.clone()]).unwrap();
        for j in 0..2 {
            for k in 0..3 {
                assert!((m[j][k] - 0.5 * (a.joints[j][k] + b.joints[j][k])).abs() < 1e-12);
            }
        }
        // trace 1 vs 4: weights 4:1, the fused point sits a fifth of the way to the looser one
        let tight = est(vec![[0.0; 3]], Some(1.0 - FUSION_EPS));
        let loose = est(vec![[5.0, -5.0, 10.0]], Some(4.0 - FUSION_EPS));
        let f = fuse_windows(&[tight, loose]).unwrap();
        for (g, w) in f[0].iter().zip([1.0, -1.0, 2.0]) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_weights_normalize() {
        let w = fusion_weights(&[Some(0.1), None, Some(3.0), Some(0.0)]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn warm_up_emits_nothing() {
        let model = tiny_model(true);
        let seq = random_seq(7, 1);
        let mut st = StreamState::new(&model, StreamConfig { stride: 2, use_covariance: true }).unwrap();
        for t in 0..6 {
            assert!(st.push(&seq.frame(t)).unwrap().is_empty());
        }
        assert!(!st.push(&seq.frame(6)).unwrap().is_empty());
        assert_eq!(st.windows_run(), 1);
    }

    #[test]
    fn stride_equal_window_reproduces_window_outputs() {
        let model = tiny_model(true);
        let seq = random_seq(21, 2);
        let opts = PipelineOptions { stream: StreamConfig { stride: 7, use_covariance: true }, ..Default::default() };
        let out = run_streaming(&seq, &model, &opts).unwrap();
        assert_eq!(out.windows_run, 3);
        for s in [0, 7, 14] {
            let w = model.forward(&seq.window(s, 7).unwrap(), true).unwrap();
            for t in 0..7 {
                assert_eq!(out.smoothed.frame(s + t), w.positions.frame(t));
            }
        }
    }

    #[test]
    fn offline_streaming_and_threaded_agree_bitwise() {
        for cov in [true, false] {
            let model = tiny_model(cov);
            let seq = random_seq(26, 3);
            for stride in [1, 3, 7] {
                let opts = PipelineOptions { stream: StreamConfig { stride, use_covariance: true }, ..Default::default() };
                let a = run_offline(&seq, &model, &opts).unwrap();
                let b = run_streaming(&seq, &model, &opts).unwrap();
                let c = run_threaded(&seq, &model, &opts, 2).unwrap();
                assert_eq!(a, b, "stride {stride}");
                assert_eq!(b, c, "stride {stride}");
                assert!(a.max_latency <= 7 - 1 + stride);
            }
        }
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let model = tiny_model(true);
        let frame = random_seq(1, 4).frame(0);
        let seq = PoseSequence::from_frames(&vec![frame; 20]).unwrap();
        let opts = PipelineOptions { stream: StreamConfig { stride: 1, use_covariance: true }, ..Default::default() };
        let out = run_streaming(&seq, &model, &opts).unwrap();
        // frames far enough from both edges see the same set of window positions
        let a = out.smoothed.frame(6);
        for t in 7..14 {
            let b = out.smoothed.frame(t);
            for j in 0..24 {
                for k in 0..3 {
                    assert!((a[j][k] - b[j][k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn errors() {
        let model = tiny_model(false);
        let opts = PipelineOptions::default();
        assert!(matches!(run_offline(&random_seq(5, 1), &model, &opts), Err(Error::TooShort { .. })));
        let bad = PipelineOptions { stream: StreamConfig { stride: 8, use_covariance: false }, ..Default::default() };
        assert!(run_offline(&random_seq(10, 1), &model, &bad).is_err());
        let mut st = StreamState::new(&model, StreamConfig::default()).unwrap();
        assert!(st.push(&[[0.0; 3]; 5]).is_err());
        st.push(&random_seq(1, 1).frame(0)).unwrap();
        assert!(matches!(st.finish(), Err(Error::TooShort { .. })));
    }

    #[test]
    fn pipeline_feeds_retarget() {
        let model = tiny_model(false);
        let skel = SkeletonDefinition::smpl24();
        let seq = random_seq(30, 5);
        let cfg = RetargetConfig::default();
        let opts = PipelineOptions {
            retarget: Some((cfg.clone(), ArmJoints::right(&skel).unwrap())),
            ..Default::default()
        };
        let out = run_offline(&seq, &model, &opts).unwrap();
        let cmds = out.commands.unwrap();
        assert_eq!(cmds.len(), 20);
        assert!(cmds.iter().all(|c| cfg.contains(c.position())));
    }
}
