//! Training a student on attention maps supplied by a frozen teacher.

use crate::data::Dataset;
use crate::train::{fit, RunArtifacts, Source, TrainConfig};
use karat_core::vit::{ForwardOptions, Vit, VitConfig};
use karat_core::{KaratError, Result, Tensor};
use std::path::Path;

fn check_geometry(teacher: &VitConfig, student: &VitConfig) -> Result<()> {
    if teacher.tokens() != student.tokens() || teacher.heads != student.heads || teacher.depth != student.depth {
        return Err(KaratError::config(format!(
            "teacher (N={}, h={}, L={}) and student (N={}, h={}, L={}) disagree",
            teacher.tokens(),
            teacher.heads,
            teacher.depth,
            student.tokens(),
            student.heads,
            student.depth
        )));
    }
    Ok(())
}

/// Student logits with every head's attention replaced by the teacher's post-activation map.
pub fn transfer_forward(teacher: &Vit, student: &Vit, image: &Tensor) -> Result<Tensor> {
    check_geometry(&teacher.cfg, &student.cfg)?;
    let attn: Vec<Vec<Tensor>> = teacher.extract_all_attention(image)?.into_iter().map(|(_, post)| post).collect();
    student.forward_with(image, ForwardOptions { attention_override: Some(&attn) })
}

/// Trains a freshly initialised student whose queries, keys and attention
/// operators stay frozen; only values, projections, MLPs, norms and the head learn.
pub fn attention_transfer_train(
    teacher: &Vit,
    student_cfg: VitConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts> {
    check_geometry(&teacher.cfg, &student_cfg)?;
    let student = Vit::new(student_cfg, cfg.seed)?;
    let trainable: Vec<bool> = (0..student.params.len())
        .map(|i| !student.is_query_key_param(i) && !student.is_operator_param(i))
        .collect();
    fit(student, cfg, train_set, eval_set, out_dir, &trainable, Source::Teacher(teacher))
}
