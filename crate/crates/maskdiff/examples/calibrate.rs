//! Desk-scale calibration driver: measures codec distillation quality and
//! wall time with the current defaults. Dev tool, not part of the test suite.

use std::time::Instant;

use maskdiff::codec::{reconstruction_f1, CodecConfig};
use maskdiff::synth::{region_mask, SynthConfig};
use maskdiff::training::{distill_student, train_teacher, DistillConfig};

fn main() -> maskdiff::Result<()> {
    let synth = SynthConfig::default();
    let codec_cfg = CodecConfig::default();
    let distill = DistillConfig::default();

    let t0 = Instant::now();
    let train_masks: Vec<_> =
        (0..600).map(|i| region_mask(&synth, 1, i)).collect::<maskdiff::Result<_>>()?;
    let held_out: Vec<_> =
        (0..256).map(|i| region_mask(&synth, 2, 10_000 + i)).collect::<maskdiff::Result<_>>()?;
    eprintln!("mask generation: {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let (teacher, tstore, trec) = train_teacher(&train_masks, &codec_cfg, &distill)?;
    eprintln!(
        "teacher: {} steps in {:.1}s, final loss {:.5}",
        trec.len(),
        t0.elapsed().as_secs_f64(),
        trec.last().unwrap().total
    );

    let t0 = Instant::now();
    let teacher_tensors = tstore.tensors()?;
    let (student, _sstore, srec) =
        distill_student(&teacher, Some(&teacher_tensors), &train_masks, &codec_cfg, &distill)?;
    eprintln!(
        "student: {} steps in {:.1}s, final loss {:.5}",
        srec.len(),
        t0.elapsed().as_secs_f64(),
        srec.last().unwrap().total
    );

    let t0 = Instant::now();
    let f1 = reconstruction_f1(&student, &held_out, 0.5)?;
    eprintln!("held-out reconstruction F1: {f1:.4} ({:.1}s)", t0.elapsed().as_secs_f64());
    Ok(())
}
