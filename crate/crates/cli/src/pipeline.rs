//! Artifact files in the output directory and the stages that produce them.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use icd_core::checkpoint::{pack_denoiser, unpack_denoiser, Checkpoint};
use icd_core::denoiser::Denoiser;
use icd_core::distill::{
    distill_cfg, pack_consistency, train_icd, unpack_consistency, write_loss_csv, ConsistencyModel, IcdStudents,
};
use icd_core::teacher::train_teacher;
use icd_core::{IcdError, Result};

use crate::config::RunConfig;

pub const TEACHER: &str = "teacher.ckpt";
pub const CFG_STUDENT: &str = "cfg.ckpt";
pub const ICD: &str = "icd.ckpt";

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes through a buffered file, creating parent directories.
pub fn write_file(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    if let Some(p) = path.parent() {
        ensure_dir(p)?;
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    body(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    write_file(path, |out| {
        writeln!(out, "step,loss")?;
        for (i, l) in losses.iter().enumerate() {
            writeln!(out, "{i},{l}")?;
        }
        Ok(())
    })
}

pub fn save_denoiser(path: &Path, cfg: &RunConfig, prefix: &str, den: &Denoiser) -> Result<()> {
    let mut ck = Checkpoint::new(cfg.schedule);
    pack_denoiser(&mut ck, prefix, den);
    if let Some(p) = path.parent() {
        ensure_dir(p)?;
    }
    ck.save(path)
}

pub fn load_denoiser(path: &Path, prefix: &str) -> Result<Denoiser> {
    unpack_denoiser(&Checkpoint::load(path)?, prefix)
}

pub fn save_students(path: &Path, cfg: &RunConfig, st: &IcdStudents) -> Result<()> {
    let mut ck = Checkpoint::new(cfg.schedule);
    pack_consistency(&mut ck, "cd", &st.cd);
    pack_consistency(&mut ck, "fcd", &st.fcd);
    if let Some(p) = path.parent() {
        ensure_dir(p)?;
    }
    ck.save(path)
}

/// Loads the forward student from `fcd_path` and the reverse one from
/// `cd_path`; both must carry the same plan.
pub fn load_students(fcd_path: &Path, cd_path: &Path) -> Result<(ConsistencyModel, ConsistencyModel)> {
    let fcd = unpack_consistency(&Checkpoint::load(fcd_path)?, "fcd")?;
    let cd = unpack_consistency(&Checkpoint::load(cd_path)?, "cd")?;
    if fcd.plan != cd.plan {
        return Err(IcdError::Contract(format!(
            "plan mismatch: fCD edges {:?}, CD edges {:?}",
            fcd.plan.edges(),
            cd.plan.edges()
        )));
    }
    if fcd.schedule.params() != cd.schedule.params() {
        return Err(IcdError::Contract("schedule mismatch between fCD and CD checkpoints".into()));
    }
    Ok((fcd, cd))
}

pub fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

pub fn teacher_stage(cfg: &RunConfig) -> Result<Denoiser> {
    let data = cfg.train_set()?;
    let sched = cfg.noise_schedule()?;
    let t = train_teacher(&data, &sched, cfg.model, &cfg.teacher_config())?;
    save_denoiser(&out_path(cfg, TEACHER), cfg, "teacher", &t.denoiser)?;
    write_losses(&out_path(cfg, "teacher_loss.csv"), &t.losses)?;
    write_file(&out_path(cfg, "dataset.csv"), |out| {
        writeln!(out, "x,y,label")?;
        for s in &data.samples {
            writeln!(out, "{},{},{}", s.x[0], s.x[1], s.label)?;
        }
        Ok(())
    })?;
    Ok(t.denoiser)
}

pub fn cfg_stage(cfg: &RunConfig, teacher: &Denoiser) -> Result<Denoiser> {
    let r = distill_cfg(
        teacher,
        &cfg.train_set()?,
        &cfg.noise_schedule()?,
        cfg.w_set(),
        &cfg.cfg_config(),
    )?;
    save_denoiser(&out_path(cfg, CFG_STUDENT), cfg, "cfg", &r.student)?;
    write_losses(&out_path(cfg, "cfg_loss.csv"), &r.losses)?;
    Ok(r.student)
}

pub fn icd_stage(cfg: &RunConfig, student: &Denoiser) -> Result<IcdStudents> {
    let st = train_icd(
        student,
        &cfg.train_set()?,
        &cfg.noise_schedule()?,
        &cfg.plan()?,
        &cfg.icd_config(),
    )?;
    save_students(&out_path(cfg, ICD), cfg, &st)?;
    write_file(&out_path(cfg, "icd_loss.csv"), |out| write_loss_csv(&st.log, out))?;
    Ok(st)
}
