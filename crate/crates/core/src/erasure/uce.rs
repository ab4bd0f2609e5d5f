//! Closed-form conditioning edits: UCE (one shot) and RECE (iterated with
//! closed-form adversarial embeddings).
//!
//! The conditioning projection is stored as `G: [embed_dim, feat]` with
//! features `G^T c`. The edit minimizes
//! `erase_scale * sum_E ||G^T c_i - v_i||^2 + sum_P ||G^T c_j - G_old^T c_j||^2
//!  + lambda ||G||_F^2`,
//! whose normal equations are an `embed_dim x embed_dim` solve.

use super::{params_hash, ErasedModel, ErasureConfig};
use crate::diffusion::{NoiseSchedule, ScoreNet, COND_PROJ};
use crate::tensor::{solve_linear, NumArray};
use crate::world::ConceptWorld;
use crate::{Error, Result};

/// Solve for the edited projection. Bit-exact short circuits: an empty erase
/// set, or erase pairs already satisfied by `g_old`, return `g_old`
/// unchanged.
pub fn uce_edit_matrix(
    g_old: &NumArray,
    erase: &[(NumArray, NumArray)],
    preserve: &[NumArray],
    lambda: f64,
    erase_scale: f64,
) -> Result<NumArray> {
    let (e_dim, f_dim) = (g_old.shape[0], g_old.shape[1]);
    if erase.is_empty() {
        return Ok(g_old.clone());
    }
    let features = |c: &NumArray| -> Vec<f64> {
        let mut out = vec![0.0; f_dim];
        for i in 0..e_dim {
            for j in 0..f_dim {
                out[j] += c.data[i] * g_old.data[i * f_dim + j];
            }
        }
        out
    };
    if erase.iter().all(|(c, v)| features(c) == v.data) {
        return Ok(g_old.clone());
    }

    let mut a = vec![0.0; e_dim * e_dim];
    let mut b = vec![0.0; e_dim * f_dim];
    for (c, v) in erase {
        for i in 0..e_dim {
            for j in 0..e_dim {
                a[i * e_dim + j] += erase_scale * c.data[i] * c.data[j];
            }
            for j in 0..f_dim {
                b[i * f_dim + j] += erase_scale * c.data[i] * v.data[j];
            }
        }
    }
    for c in preserve {
        let f = features(c);
        for i in 0..e_dim {
            for j in 0..e_dim {
                a[i * e_dim + j] += c.data[i] * c.data[j];
            }
            for j in 0..f_dim {
                b[i * f_dim + j] += c.data[i] * f[j];
            }
        }
    }
    for i in 0..e_dim {
        a[i * e_dim + i] += lambda;
    }
    let solved = solve_linear(&a, &b, e_dim, f_dim).map_err(|e| match e {
        Error::Singular { .. } => Error::Singular {
            context: "uce normal equations".into(),
            hint: "erase+preserve embeddings are rank-deficient; enable the ridge term".into(),
        },
        other => other,
    })?;
    Ok(NumArray::new(vec![e_dim, f_dim], solved))
}

/// Frobenius norm of the edit objective's gradient at `g`, with lambda = 0.
/// Vanishes at the exact minimizer on full-rank systems.
pub fn uce_objective_grad_norm(
    g: &NumArray,
    g_old: &NumArray,
    erase: &[(NumArray, NumArray)],
    preserve: &[NumArray],
    erase_scale: f64,
) -> f64 {
    let (e_dim, f_dim) = (g.shape[0], g.shape[1]);
    let feats = |m: &NumArray, c: &NumArray| -> Vec<f64> {
        let mut out = vec![0.0; f_dim];
        for i in 0..e_dim {
            for j in 0..f_dim {
                out[j] += c.data[i] * m.data[i * f_dim + j];
            }
        }
        out
    };
    let mut grad = vec![0.0; e_dim * f_dim];
    for (c, v) in erase {
        let f = feats(g, c);
        for i in 0..e_dim {
            for j in 0..f_dim {
                grad[i * f_dim + j] += 2.0 * erase_scale * c.data[i] * (f[j] - v.data[j]);
            }
        }
    }
    for c in preserve {
        let f = feats(g, c);
        let f_old = feats(g_old, c);
        for i in 0..e_dim {
            for j in 0..f_dim {
                grad[i * f_dim + j] += 2.0 * c.data[i] * (f[j] - f_old[j]);
            }
        }
    }
    grad.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn model_with_projection(base: &ScoreNet, g_new: &NumArray, strength: f64) -> ScoreNet {
    let g_old = base.params.value(COND_PROJ);
    let blended = if strength == 0.0 {
        g_old.clone()
    } else if strength == 1.0 {
        g_new.clone()
    } else {
        g_old.scale(1.0 - strength).add_scaled(g_new, strength)
    };
    let mut params = base.params.clone();
    *params.value_mut(COND_PROJ) = blended;
    base.with_params(params)
}

fn closed_form_model(
    base: &ScoreNet,
    cfg: &ErasureConfig,
    g_new: &NumArray,
    adversarial: Vec<NumArray>,
) -> ErasedModel {
    let mut checkpoints = Vec::with_capacity(cfg.snapshot_strengths.len());
    let mut strengths = cfg.snapshot_strengths.clone();
    strengths.sort_by(|x, y| x.partial_cmp(y).unwrap());
    for s in strengths {
        checkpoints.push((s, model_with_projection(base, g_new, s).params));
    }
    ErasedModel {
        net: model_with_projection(base, g_new, cfg.strength),
        config: cfg.clone(),
        checkpoints,
        base_hash: params_hash(&base.params),
        reached_strength: 1.0,
        adversarial_embeddings: adversarial,
    }
}

/// Unified closed-form edit: align the erased concept's conditioning with
/// the configured substitute while preserving every other concept's
/// response.
pub fn erase_uce(
    base: &ScoreNet,
    world: &ConceptWorld,
    _schedule: &NoiseSchedule,
    cfg: &ErasureConfig,
) -> Result<ErasedModel> {
    let preserve = cfg.preserve_embeddings(world)?;
    if preserve.is_empty() && cfg.uce_lambda == 0.0 {
        return Err(Error::invalid(
            "uce needs a nonempty preserve set or a positive ridge term",
        ));
    }
    let v = cfg.substitute_value(base, world)?;
    let erase = vec![(world.embedding(&cfg.target)?.clone(), v)];
    let g_new = uce_edit_matrix(
        base.params.value(COND_PROJ),
        &erase,
        &preserve,
        cfg.uce_lambda,
        cfg.erase_scale,
    )?;
    Ok(closed_form_model(base, cfg, &g_new, Vec::new()))
}

/// Closed-form adversarial embedding: the ridge minimizer of
/// `||G_cur^T e - G_base^T c_target||^2 + lambda ||e||^2`.
pub fn rece_adversarial_embedding(
    g_cur: &NumArray,
    g_base: &NumArray,
    target_emb: &NumArray,
    lambda: f64,
) -> Result<NumArray> {
    let (e_dim, f_dim) = (g_cur.shape[0], g_cur.shape[1]);
    // b = G_base^T c
    let mut b_feat = vec![0.0; f_dim];
    for i in 0..e_dim {
        for j in 0..f_dim {
            b_feat[j] += target_emb.data[i] * g_base.data[i * f_dim + j];
        }
    }
    // normal equations: (G G^T + lambda I) e = G b
    let mut a = vec![0.0; e_dim * e_dim];
    for i in 0..e_dim {
        for j in 0..e_dim {
            let mut acc = 0.0;
            for k in 0..f_dim {
                acc += g_cur.data[i * f_dim + k] * g_cur.data[j * f_dim + k];
            }
            a[i * e_dim + j] = acc;
        }
        a[i * e_dim + i] += lambda;
    }
    let mut rhs = vec![0.0; e_dim];
    for i in 0..e_dim {
        for k in 0..f_dim {
            rhs[i] += g_cur.data[i * f_dim + k] * b_feat[k];
        }
    }
    let e = solve_linear(&a, &rhs, e_dim, 1).map_err(|err| match err {
        Error::Singular { .. } => Error::Singular {
            context: "rece embedding recovery".into(),
            hint: "projection is rank-deficient; raise the ridge term".into(),
        },
        other => other,
    })?;
    Ok(NumArray::vector(e))
}

/// Iterated UCE: each round recovers the closed-form embedding that still
/// reaches the original target response, adds it to the erase set, and
/// re-derives the edit from the base projection.
pub fn erase_rece(
    base: &ScoreNet,
    world: &ConceptWorld,
    _schedule: &NoiseSchedule,
    cfg: &ErasureConfig,
) -> Result<ErasedModel> {
    let preserve = cfg.preserve_embeddings(world)?;
    let v = cfg.substitute_value(base, world)?;
    let g_base = base.params.value(COND_PROJ).clone();
    let target_emb = world.embedding(&cfg.target)?.clone();

    let mut erase = vec![(target_emb.clone(), v.clone())];
    let mut g_cur =
        uce_edit_matrix(&g_base, &erase, &preserve, cfg.uce_lambda, cfg.erase_scale)?;
    let mut recovered = Vec::new();
    for _round in 0..cfg.rece_rounds {
        let e_adv = rece_adversarial_embedding(&g_cur, &g_base, &target_emb, cfg.rece_lambda)?;
        recovered.push(e_adv.clone());
        erase.push((e_adv, v.clone()));
        g_cur = uce_edit_matrix(&g_base, &erase, &preserve, cfg.uce_lambda, cfg.erase_scale)?;
    }
    Ok(closed_form_model(base, cfg, &g_cur, recovered))
}
