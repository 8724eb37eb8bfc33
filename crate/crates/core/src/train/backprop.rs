//! Hand-derived reverse pass through classifier, pooling, output projection
//! and the sparse attention of every head.
//!
//! Supports are treated as constants: the radius is a step function of `θ`,
//! so only the `ln f(d|θ)` score term carries gradient into the decay scale.

use ndarray::{s, Array1, Array2, Axis};

use crate::attention::{AttentionMode, HeadOutput, ModelOutput, ModelParams};
use crate::decay::DecayPrior;
use crate::grid::{pairwise_distance, Coord};

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

struct HeadGrad {
    dq: Array2<f64>,
    dk: Array2<f64>,
    dv: Array2<f64>,
    dtheta: f64,
}

fn head_backward(head: &HeadOutput, coords: &[Coord], prior: Option<&DecayPrior>, dctx: &Array2<f64>) -> HeadGrad {
    let q = &head.proj.q;
    let k = &head.proj.k;
    let v = &head.proj.v;
    let (n, dk) = q.dim();
    let inv_sigma2 = 1.0 / (dk as f64).sqrt();
    let post = &head.posterior;
    let support = post.support();
    let weights = post.weights();

    let qs = q.as_slice().expect("standard layout");
    let ks = k.as_slice().expect("standard layout");
    let vs = v.as_slice().expect("standard layout");
    let dctx = dctx.as_standard_layout();
    let dc = dctx.as_slice().expect("standard layout");

    let mut dq = vec![0.0; n * dk];
    let mut dkey = vec![0.0; n * dk];
    let mut dv = vec![0.0; n * dk];
    let mut dtheta = 0.0;
    let mut dw = Vec::new();
    let mut off = 0;
    for i in 0..n {
        let cols = support.neighbors(i);
        let w = &weights[off..off + cols.len()];
        off += cols.len();
        let dci = &dc[i * dk..(i + 1) * dk];
        dw.clear();
        let mut mean = 0.0;
        for (&j, &wij) in cols.iter().zip(w) {
            let vj = &vs[j * dk..(j + 1) * dk];
            let g: f64 = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
            dw.push(g);
            mean += wij * g;
            for (d, &c) in dv[j * dk..(j + 1) * dk].iter_mut().zip(dci) {
                *d += wij * c;
            }
        }
        let qi = &qs[i * dk..(i + 1) * dk];
        for ((&j, &wij), &g) in cols.iter().zip(w).zip(&dw) {
            let ds = wij * (g - mean);
            if ds == 0.0 {
                continue;
            }
            if let Some(p) = prior {
                dtheta += ds * p.dlog_dtheta(pairwise_distance(coords[i], coords[j]));
            }
            let kj = &ks[j * dk..(j + 1) * dk];
            let scale = ds * inv_sigma2;
            for c in 0..dk {
                let diff = qi[c] - kj[c];
                dq[i * dk + c] -= scale * diff;
                dkey[j * dk + c] += scale * diff;
            }
        }
    }
    let shape = (n, dk);
    HeadGrad {
        dq: Array2::from_shape_vec(shape, dq).unwrap(),
        dk: Array2::from_shape_vec(shape, dkey).unwrap(),
        dv: Array2::from_shape_vec(shape, dv).unwrap(),
        dtheta,
    }
}

/// Gradient of a loss with respect to every parameter, given the loss
/// gradient over the classifier logits.
pub(crate) fn backward(
    x: &Array2<f64>,
    coords: &[Coord],
    params: &ModelParams,
    mode: AttentionMode,
    out: &ModelOutput,
    dlogits: &Array1<f64>,
) -> ModelParams {
    let mut g = params.zeros_like();

    let z = &out.pool.embedding;
    g.cls_w = outer(z, dlogits);
    g.cls_b = dlogits.clone();
    let dz = params.cls_w.dot(dlogits);

    let beta = &out.pool.scores;
    let hidden = &out.pool.hidden;
    let mut dtokens = outer(beta, &dz);
    let dbeta = out.tokens.dot(&dz);
    let mean = beta.dot(&dbeta);
    let da = beta * &(dbeta - mean);
    g.pool_w = hidden.t().dot(&da);
    let dhidden = outer(&da, &params.pool_w);
    let dpre = dhidden * &hidden.mapv(|u| 1.0 - u * u);
    g.pool_v = out.tokens.t().dot(&dpre);
    dtokens += &dpre.dot(&params.pool_v.t());

    g.w_out = out.concat.t().dot(&dtokens);
    let dconcat = dtokens.dot(&params.w_out.t());

    let dk = params.heads[0].d_k();
    for (h, (head, head_out)) in params.heads.iter().zip(&out.heads).enumerate() {
        let dctx = dconcat.slice(s![.., h * dk..(h + 1) * dk]).to_owned();
        let prior = matches!(mode, AttentionMode::Psa).then_some(&head.decay);
        let hg = head_backward(head_out, coords, prior, &dctx);
        let gh = &mut g.heads[h];
        gh.w_q = x.t().dot(&hg.dq);
        gh.w_k = x.t().dot(&hg.dk);
        gh.w_v = x.t().dot(&hg.dv);
        gh.decay.raw = hg.dtheta * head.decay.grad(0.0).dtheta_drho;
    }
    g
}
