//! Finite-difference suites over the tape primitives, the encoder and the
//! full distillation objective on a tiny configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{adapter_on_tape, distill_loss_on_tape, fuse_tokens, Adapter, LossMode};
use crate::gradcheck::{run_grad_check, GradCheck, GradCheckReport};
use crate::math::LN_EPS;
use crate::tape::{GradTape, Var};
use crate::tensor::TensorBuf;
use crate::vit::{ViTConfig, ViTEncoder};

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub component: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl SuiteEntry {
    fn from_report(component: impl Into<String>, r: &GradCheckReport) -> Self {
        Self {
            component: component.into(),
            entries: r.params.iter().map(|p| p.entries).sum(),
            max_rel_err: r.max_rel_err,
            passed: r.passed,
        }
    }
}

/// Student side of the tiny check: 16×16 input, p=4, width 8, two blocks.
pub fn tiny_student() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        depth: 2,
        embed_dim: 8,
        num_heads: 2,
        mlp_ratio: 4,
    }
}

/// Teacher side: same geometry, width 16.
pub fn tiny_teacher() -> ViTConfig {
    ViTConfig {
        embed_dim: 16,
        ..tiny_student()
    }
}

/// Encoder with every parameter perturbed away from its init, so biases,
/// class token and norm affine terms all carry signal.
pub fn randomized_encoder(config: &ViTConfig, seed: u64) -> Result<ViTEncoder> {
    let mut enc = ViTEncoder::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a11);
    for p in enc.params_mut()? {
        let noise = TensorBuf::randn(p.shape(), 0.1, &mut rng);
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    Ok(enc)
}

type Prim = Box<dyn Fn(&mut GradTape, &[Var]) -> Result<Var>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Prim, Vec<TensorBuf>)> {
    let mut r = |s: &[usize]| TensorBuf::randn(s, 1.0, rng);
    let w = r(&[3, 4]);
    // fixed projection to a scalar keeps every output entry in play
    let weigh = move |t: &mut GradTape, y: Var| -> Result<Var> {
        let shape = t.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let c = t.constant(TensorBuf::from_fn(&shape, |i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4 + 0.01 * n as f64));
        let p = t.mul(y, c)?;
        Ok(t.sum(p))
    };
    let target = r(&[3, 4]);
    let target2 = target.clone();
    vec![
        ("matmul", Box::new(move |t: &mut GradTape, v: &[Var]| { let y = t.matmul(v[0], v[1])?; weigh(t, y) }) as Prim, vec![r(&[3, 5]), r(&[5, 4])]),
        ("add_row_bias", Box::new(move |t: &mut GradTape, v: &[Var]| { let y = t.add_row_bias(v[0], v[1])?; weigh(t, y) }), vec![r(&[3, 4]), r(&[4])]),
        ("add/sub/mul", Box::new(move |t: &mut GradTape, v: &[Var]| { let a = t.add(v[0], v[1])?; let s = t.sub(a, v[2])?; let y = t.mul(s, v[0])?; weigh(t, y) }), vec![r(&[3, 4]), r(&[3, 4]), r(&[3, 4])]),
        ("scale/gelu", Box::new(move |t: &mut GradTape, v: &[Var]| { let s = t.scale(v[0], 1.7); let y = t.gelu(s); weigh(t, y) }), vec![r(&[3, 4])]),
        ("softmax_rows", Box::new(move |t: &mut GradTape, v: &[Var]| { let y = t.softmax_rows(v[0])?; weigh(t, y) }), vec![r(&[3, 4])]),
        ("layer_norm_rows", Box::new(move |t: &mut GradTape, v: &[Var]| { let y = t.layer_norm_rows(v[0], v[1], v[2], LN_EPS)?; weigh(t, y) }), vec![r(&[3, 4]), r(&[4]), r(&[4])]),
        ("transpose/reshape", Box::new(move |t: &mut GradTape, v: &[Var]| { let y = t.transpose(v[0])?; let y = t.reshape(y, &[2, 6])?; weigh(t, y) }), vec![r(&[3, 4])]),
        ("slice/concat/gather", Box::new(move |t: &mut GradTape, v: &[Var]| {
            let a = t.slice_rows(v[0], 1, 2)?;
            let b = t.slice_cols(v[0], 0, 3)?;
            let b = t.slice_rows(b, 0, 2)?;
            let c = t.concat_cols(&[a, b])?;
            let d = t.concat_rows(&[c, c])?;
            let y = t.gather_rows(d, &[3, 0, 0, 2])?;
            weigh(t, y)
        }), vec![r(&[3, 4])]),
        ("sum/mean", Box::new(move |t: &mut GradTape, v: &[Var]| { let a = t.mul(v[0], v[0])?; let s = t.sum(a); let m = t.mean(v[0]); t.add(s, m) }), vec![r(&[3, 4])]),
        ("kl_rows", Box::new(move |t: &mut GradTape, v: &[Var]| t.kl_rows(v[0], v[1])), vec![r(&[3, 4]), target]),
        ("mse", Box::new(move |t: &mut GradTape, v: &[Var]| { let c = t.constant(target2.clone()); t.mse(v[0], c) }), vec![r(&[3, 4])]),
        ("matmul_shared", Box::new(move |t: &mut GradTape, v: &[Var]| { let wt = t.constant(w.clone()); let y = t.matmul(v[0], wt)?; let y = t.matmul(y, v[1])?; weigh(t, y) }), vec![r(&[2, 3]), r(&[4, 2])]),
    ]
}

/// Distillation objective through student encoder and adapter against a
/// fused target from two tiny teachers.
pub fn distill_objective_check(mode: LossMode, seed: u64, cfg: GradCheck) -> Result<GradCheckReport> {
    let student = randomized_encoder(&tiny_student(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a6e);
    let image = TensorBuf::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    let teachers = [
        randomized_encoder(&tiny_teacher(), seed + 1)?,
        randomized_encoder(&tiny_teacher(), seed + 2)?,
    ];
    let outs = teachers
        .iter()
        .map(|t| t.encode(&image).map(|s| s.into_tensor()))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_tokens(&outs.iter().collect::<Vec<_>>())?;
    let mut adapter = Adapter::init(8, 16, seed ^ 0xada);
    adapter.bias = TensorBuf::randn(&[16], 0.1, &mut rng);
    let n_enc = student.params().len();

    let mut params = student.params().to_vec();
    params.push(adapter.weight.clone());
    params.push(adapter.bias.clone());
    run_grad_check(
        |tape, vars| {
            let tokens = student.forward(tape, &vars[..n_enc], &image)?;
            let y = adapter_on_tape(tape, tokens, [vars[n_enc], vars[n_enc + 1]])?;
            Ok(distill_loss_on_tape(tape, y, &fused, mode)?.objective)
        },
        &params,
        cfg,
    )
}

/// Weighted sum of the encoder's final-LN output.
pub fn encoder_check(seed: u64, cfg: GradCheck) -> Result<GradCheckReport> {
    let enc = randomized_encoder(&tiny_student(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe4c);
    let image = TensorBuf::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    let weights = TensorBuf::randn(&[enc.config().num_tokens(), 8], 1.0, &mut rng);
    run_grad_check(
        |tape, vars| {
            let y = enc.forward(tape, vars, &image)?;
            let w = tape.constant(weights.clone());
            let p = tape.mul(y, w)?;
            Ok(tape.sum(p))
        },
        enc.params(),
        cfg,
    )
}

/// Every component: primitives, encoder, then the objective in each loss mode.
pub fn tiny_suite(seed: u64, cfg: GradCheck) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, f, params) in primitive_cases(&mut rng) {
        let r = run_grad_check(f, &params, cfg)?;
        out.push(SuiteEntry::from_report(format!("op:{name}"), &r));
    }
    let r = encoder_check(seed, cfg)?;
    out.push(SuiteEntry::from_report("encoder", &r));
    for mode in [LossMode::TfdSfd, LossMode::Tfd, LossMode::Sfd, LossMode::Mse] {
        let r = distill_objective_check(mode, seed, cfg)?;
        out.push(SuiteEntry::from_report(format!("objective:{mode}"), &r));
    }
    Ok(out)
}
