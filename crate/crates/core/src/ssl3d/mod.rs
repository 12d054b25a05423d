//! Semi-supervised re-training of a 3D segmenter with `L_sup + λ·(L_uns + L_pl)`.

mod losses;
mod model;
mod plugin;
mod train;

pub use losses::{class_softmax, ema_update, lambda_at, loss_pl, softmax_mse_var, uns_meanteacher, uns_selftrain};
pub use model::{build_seg3d, Seg3D, Seg3DConfig};
pub use plugin::{
    register_unsup_plugin, MeanTeacherLoss, Method, PluginRegistry, SelfTrainingLoss, TeacherPolicy, UnsupBatch,
    UnsupervisedLoss,
};
pub use train::{mean_dice, train_ssl, EpochRecord, SSLConfig, SslData, SslTrace, StepRecord, UnlabeledCase};

/// A teacher/student pair sharing one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudent {
    pub student: Seg3D,
    pub teacher: Seg3D,
}

impl TeacherStudent {
    /// Both networks start from the same weights.
    pub fn new(student: Seg3D) -> Self {
        Self { teacher: student.clone(), student }
    }

    pub fn ema_step(&mut self, alpha: f64) -> crate::Result<()> {
        ema_update(&mut self.teacher, &self.student, alpha)
    }
}
