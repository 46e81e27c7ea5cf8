//! Mean-reverting score-based diffusion over frame matrices: the forward
//! kernel, the score network and its denoising loss, and the reverse-time
//! sampler with classifier and classifier-free guidance.

mod guidance;
mod sampler;
mod schedule;
mod scorenet;

pub use guidance::{
    combine_cfg, guided_score_cg, CfgScore, CgScore, Condition, ConditionalNets, EmotionPosterior,
    NetScore, PreparedBatch, Sampled,
};
pub use sampler::{
    sample_one, sample_reverse, GuidanceConfig, GuidanceMode, SamplerOptions, ScoreFn,
    TrajectoryRecord,
};
pub use schedule::{time_embedding, NoiseSchedule, TIME_EMBED_DIM};
pub use scorenet::{
    build_dsm, condition_rows, dsm_loss, dsm_objective, perturb, perturb_with_noise, time_rows,
    DsmDraw, DsmExample, Precondition, ScoreNet, T_MIN,
};
