//! Dynamic context routing: per-task KV composition for cross-modal attention.
//!
//! Each training task declares, per stream, which KV sources its cross-modal
//! attention sees (the other stream's latents, the learnable context bank),
//! whether the stream is a frozen clean reference (timestep 0, gradients
//! detached, zero loss weight), and whether the two streams share one
//! timestep draw. The gated baseline replaces this routing with a binary
//! gate that multiplies the whole cross-modal residual.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    TextToVideo,
    TextToAudio,
    AudioToVideo,
    VideoToAudio,
    JointAV,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::TextToVideo,
        TaskKind::TextToAudio,
        TaskKind::AudioToVideo,
        TaskKind::VideoToAudio,
        TaskKind::JointAV,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::TextToVideo => "t2v",
            TaskKind::TextToAudio => "t2a",
            TaskKind::AudioToVideo => "a2v",
            TaskKind::VideoToAudio => "v2a",
            TaskKind::JointAV => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t2v" => Ok(TaskKind::TextToVideo),
            "t2a" => Ok(TaskKind::TextToAudio),
            "a2v" => Ok(TaskKind::AudioToVideo),
            "v2a" => Ok(TaskKind::VideoToAudio),
            "joint" => Ok(TaskKind::JointAV),
            other => Err(Error::contract(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Routing switches for one stream's cross-modal attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamRoute {
    /// Attend to the other stream's latent tokens.
    pub use_cross_latent: bool,
    /// Attend to the learnable context bank.
    pub use_lct: bool,
    /// Frozen clean-conditioning stream: timestep 0, KV detached, no loss.
    pub is_reference: bool,
    /// 0 or 1 weight of this stream's loss term.
    pub loss_weight: u8,
}

impl StreamRoute {
    /// Whether the stream's transformer runs at all. Streams that carry no
    /// loss and are not references are skipped entirely.
    pub fn is_active(&self) -> bool {
        self.loss_weight == 1 || self.is_reference
    }

    fn inactive() -> Self {
        StreamRoute { use_cross_latent: false, use_lct: true, is_reference: false, loss_weight: 0 }
    }

    fn lct_only(loss: u8, reference: bool) -> Self {
        StreamRoute {
            use_cross_latent: false,
            use_lct: true,
            is_reference: reference,
            loss_weight: loss,
        }
    }

    fn joint(reference: bool, loss: u8) -> Self {
        StreamRoute {
            use_cross_latent: true,
            use_lct: true,
            is_reference: reference,
            loss_weight: loss,
        }
    }
}

/// The per-task switch set for both streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoutingPlan {
    pub audio: StreamRoute,
    pub video: StreamRoute,
    /// Both streams draw one shared timestep.
    pub shared_timestep: bool,
}

impl RoutingPlan {
    pub fn route(&self, stream: StreamKind) -> &StreamRoute {
        match stream {
            StreamKind::Audio => &self.audio,
            StreamKind::Video => &self.video,
        }
    }

    /// Inference plan: the fully conditional pass (cross latents + LCT).
    pub fn joint_inference() -> Self {
        RoutingPlan {
            audio: StreamRoute::joint(false, 1),
            video: StreamRoute::joint(false, 1),
            shared_timestep: true,
        }
    }

    /// Inference plan: both streams see only their context banks. This is
    /// the unconditional branch used by context guidance; it is the same
    /// code path single-modality training uses.
    pub fn lct_only_inference() -> Self {
        RoutingPlan {
            audio: StreamRoute::lct_only(1, false),
            video: StreamRoute::lct_only(1, false),
            shared_timestep: true,
        }
    }

    /// Inference plan: cross-modal attention dropped outright (no latents,
    /// no LCT substitute). Realizes the modality-drop unconditional branch
    /// of plain multi-modal CFG.
    pub fn drop_cross_inference() -> Self {
        let r = StreamRoute {
            use_cross_latent: false,
            use_lct: false,
            is_reference: false,
            loss_weight: 1,
        };
        RoutingPlan { audio: r, video: r, shared_timestep: true }
    }

    /// Inference plan shaped like audio-to-video: audio is a clean reference
    /// feeding the video stream. Used by the static-unconditional baseline.
    pub fn audio_reference_inference() -> Self {
        routing_plan(TaskKind::AudioToVideo)
    }

    pub fn video_reference_inference() -> Self {
        routing_plan(TaskKind::VideoToAudio)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Audio,
    Video,
}

/// The five task routings.
pub fn routing_plan(task: TaskKind) -> RoutingPlan {
    match task {
        TaskKind::TextToVideo => RoutingPlan {
            audio: StreamRoute::inactive(),
            video: StreamRoute::lct_only(1, false),
            shared_timestep: false,
        },
        TaskKind::TextToAudio => RoutingPlan {
            audio: StreamRoute::lct_only(1, false),
            video: StreamRoute::inactive(),
            shared_timestep: false,
        },
        TaskKind::AudioToVideo => RoutingPlan {
            audio: StreamRoute::lct_only(0, true),
            video: StreamRoute::joint(false, 1),
            shared_timestep: false,
        },
        TaskKind::VideoToAudio => RoutingPlan {
            audio: StreamRoute::joint(false, 1),
            video: StreamRoute::lct_only(0, true),
            shared_timestep: false,
        },
        TaskKind::JointAV => RoutingPlan {
            audio: StreamRoute::joint(false, 1),
            video: StreamRoute::joint(false, 1),
            shared_timestep: true,
        },
    }
}

/// Gate values of the binary-gate baseline: 1 whenever a stream receives the
/// other modality, 0 otherwise.
pub fn gated_baseline_plan(task: TaskKind) -> (u8, u8) {
    let plan = routing_plan(task);
    (plan.audio.use_cross_latent as u8, plan.video.use_cross_latent as u8)
}

/// Task routing for the gated baseline variant: activity, reference and loss
/// semantics are identical, but there are no context banks and the cross
/// residual is multiplied by the gate (g = 0 deletes it).
pub fn gated_routing_plan(task: TaskKind) -> RoutingPlan {
    let mut plan = routing_plan(task);
    let (g_a, g_v) = gated_baseline_plan(task);
    plan.audio.use_lct = false;
    plan.video.use_lct = false;
    plan.audio.use_cross_latent = g_a == 1;
    plan.video.use_cross_latent = g_v == 1;
    plan
}
