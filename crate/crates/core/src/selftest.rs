//! Offline sanity suite behind `rip self-test`: no network, no model files
//! unless an LPIPS spec is supplied.

use std::path::Path;

use crate::backend::{constant_fill, harmonic_fill, test_card, HarmonicParams};
use crate::image::{composite, ImageBuffer, MaskRaster};
use crate::mask::{checkpoint_iterations, inpaint_fraction, render_mask, Fraction, GridSpec, MaskSchedule};
use crate::metrics::{ms_ssim, ssim, FeatureNet, FeatureNetSpec, SsimParams};
use crate::stats::mean_ci;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckOutcome {
    match f() {
        Ok(detail) => CheckOutcome { name, passed: true, detail },
        Err(detail) => CheckOutcome { name, passed: false, detail },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn prng() -> Result<String, String> {
    let grid = GridSpec::new(512, 64).map_err(|e| e.to_string())?;
    let mut s = MaskSchedule::new(0, grid);
    let got: Vec<u32> = (0..8).map(|_| s.next_mask().cell_index).collect();
    // ChaCha20 keystream for key u64le(0) || 0^24, reduced with Lemire's method
    ensure(got == [36, 10, 6, 49, 35, 13, 7, 33], || format!("seed 0 sequence {got:?}"))?;
    let mut a = MaskSchedule::new(12345, grid);
    let mut b = MaskSchedule::new(12345, grid);
    for _ in 0..1000 {
        ensure(a.next_mask() == b.next_mask(), || "replay diverged".into())?;
    }
    Ok("frozen sequence and replay match".into())
}

fn accounting() -> Result<String, String> {
    ensure(inpaint_fraction(4, 256, 512) == Fraction::from_integer(1), || "4 x 256".into())?;
    ensure(inpaint_fraction(16, 128, 512) == Fraction::from_integer(1), || "16 x 128".into())?;
    ensure(inpaint_fraction(16, 256, 512) == Fraction::from_integer(4), || "16 x 256".into())?;
    let c = checkpoint_iterations(Fraction::new(1, 2), Fraction::from_integer(4), 256, 512).map_err(|e| e.to_string())?;
    ensure(c == [2, 4, 6, 8, 10, 12, 14, 16], || format!("{c:?}"))?;
    Ok("fractions exact".into())
}

fn mask_only() -> Result<String, String> {
    let size = 128;
    let grid = GridSpec::new(size, 16).map_err(|e| e.to_string())?;
    let original = test_card(size);
    let mut current = original.clone();
    let mut schedule = MaskSchedule::new(7, grid);
    let mut union = vec![false; (size * size) as usize];
    let mut last_mse = 0.0;
    for _ in 0..32 {
        let sel = schedule.next_mask();
        let mask = render_mask(&sel, &grid);
        let (x0, y0, w, h) = sel.rect;
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                union[(y * size + x) as usize] = true;
            }
        }
        let candidate = constant_fill(&current, &mask, [128; 3]);
        current = composite(&current, &candidate, &mask).map_err(|e| e.to_string())?;
        for y in 0..size {
            for x in 0..size {
                if !union[(y * size + x) as usize] && current.pixel(x, y) != original.pixel(x, y) {
                    return Err(format!("pixel ({x},{y}) changed outside the drawn cells"));
                }
            }
        }
        let mse = original.mse(&current).map_err(|e| e.to_string())?;
        ensure(mse >= last_mse, || format!("MSE fell from {last_mse} to {mse}"))?;
        last_mse = mse;
    }
    Ok("32 iterations, no stray pixels, MSE monotone".into())
}

fn harmonic() -> Result<String, String> {
    let img = ImageBuffer::from_fn(128, 128, |x, y| [(x + y) as u8, (2 * x) as u8, 200 - y as u8]);
    let mask = MaskRaster::from_rect(128, 128, (40, 30, 32, 32));
    let out = harmonic_fill(&img, &mask, &HarmonicParams::default()).map_err(|e| e.to_string())?;
    let mut worst = 0i32;
    for (a, b) in img.as_raw().iter().zip(out.as_raw()) {
        worst = worst.max((*a as i32 - *b as i32).abs());
    }
    ensure(worst <= 2, || format!("ramp error {worst}"))?;
    Ok(format!("ramp error {worst}"))
}

fn ssim_identity() -> Result<String, String> {
    let p = SsimParams::default();
    let a = test_card(176);
    let s = ssim(&a, &a, &p).map_err(|e| e.to_string())?;
    let m = ms_ssim(&a, &a, &p).map_err(|e| e.to_string())?;
    ensure(s == 1.0 && m == 1.0, || format!("ssim {s}, ms-ssim {m}"))?;
    let b = ImageBuffer::from_fn(176, 176, |x, y| a.pixel((x + 8) % 176, y));
    let shifted = ssim(&a, &b, &p).map_err(|e| e.to_string())?;
    ensure(shifted < 1.0, || format!("shifted ssim {shifted}"))?;
    Ok("identity exact, shift sensitive".into())
}

fn stats() -> Result<String, String> {
    let c = mean_ci(&[0.0, 2.0], 0.95).map_err(|e| e.to_string())?;
    // t(1, 0.975)
    let t1 = 12.706_204_736_174_704;
    ensure((c.ci_high - 1.0 - t1).abs() < 1e-12, || format!("ciHigh {}", c.ci_high))?;
    let one = mean_ci(&[0.37], 0.95).map_err(|e| e.to_string())?;
    ensure(one.ci_low == 0.37 && one.ci_high == 0.37, || "n = 1 did not collapse".into())?;
    Ok("Student-t interval matches".into())
}

fn lpips_identity(spec: &FeatureNetSpec) -> Result<String, String> {
    let net = FeatureNet::load(spec).map_err(|e| e.to_string())?;
    let a = test_card(64);
    let d = net.lpips(&a, &a).map_err(|e| e.to_string())?;
    ensure(d.abs() < 1e-6, || format!("d(a, a) = {d}"))?;
    Ok(format!("{}: d(a, a) = {d}", net.name()))
}

/// Runs every check; LPIPS networks are checked only when given.
pub fn run(lpips: &[FeatureNetSpec], base: &Path) -> Vec<CheckOutcome> {
    let mut out = vec![
        check("mask PRNG determinism", prng),
        check("pixel-fraction accounting", accounting),
        check("mask-only mutation", mask_only),
        check("harmonic fill on a ramp", harmonic),
        check("SSIM / MS-SSIM identity", ssim_identity),
        check("Student-t intervals", stats),
    ];
    for spec in lpips {
        let spec = spec.resolved(base);
        out.push(check("LPIPS identity", || lpips_identity(&spec)));
    }
    out
}
