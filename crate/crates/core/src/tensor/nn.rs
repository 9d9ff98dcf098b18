use super::{Graph, Var};
use crate::error::{Error, Result};

/// Graph handles for one GRU cell. Gate blocks are packed `[reset | update | candidate]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    /// `[d_in, 3·d_h]`
    pub w_ih: Var,
    /// `[d_h, 3·d_h]`
    pub w_hh: Var,
    /// `[3·d_h]`
    pub b_ih: Var,
    /// `[3·d_h]`
    pub b_hh: Var,
}

/// One GRU step:
///
/// ```text
/// r  = σ(x·W_ir + b_ir + h·W_hr + b_hr)
/// u  = σ(x·W_iu + b_iu + h·W_hu + b_hu)
/// n  = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
/// h' = (1 − u) ⊙ h + u ⊙ n
/// ```
///
/// `x` and `h` are either single vectors (`[d_in]`, `[d_h]`) or row batches
/// (`[B, d_in]`, `[B, d_h]`); the result has the same rank as `h`.
pub fn gru_cell(g: &mut Graph<'_>, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let vector = g.shape(h).len() == 1;
    let (x, h) = if vector {
        let (dx, dh) = (g.shape(x)[0], g.shape(h)[0]);
        (g.reshape(x, &[1, dx])?, g.reshape(h, &[1, dh])?)
    } else {
        (x, h)
    };
    let (sx, sh) = (g.shape(x).to_vec(), g.shape(h).to_vec());
    let (sw, su) = (g.shape(p.w_ih).to_vec(), g.shape(p.w_hh).to_vec());
    let dh = sh[1];
    let consistent = sx.len() == 2
        && sx[0] == sh[0]
        && sw == [sx[1], 3 * dh]
        && su == [dh, 3 * dh]
        && g.shape(p.b_ih) == [3 * dh]
        && g.shape(p.b_hh) == [3 * dh];
    if !consistent {
        return Err(Error::Dimension {
            op: "gru_cell",
            lhs: [sx, sh].concat(),
            rhs: [sw, su].concat(),
        });
    }

    let gi = g.linear(x, p.w_ih, p.b_ih)?;
    let gh = g.linear(h, p.w_hh, p.b_hh)?;
    let gate = |g: &mut Graph<'_>, src: Var, k: usize| g.slice(src, 1, k * dh, (k + 1) * dh);

    let (ir, hr) = (gate(g, gi, 0)?, gate(g, gh, 0)?);
    let pre_r = g.add(ir, hr)?;
    let r = g.sigmoid(pre_r);

    let (iu, hu) = (gate(g, gi, 1)?, gate(g, gh, 1)?);
    let pre_u = g.add(iu, hu)?;
    let u = g.sigmoid(pre_u);

    let (in_, hn) = (gate(g, gi, 2)?, gate(g, gh, 2)?);
    let gated = g.mul(r, hn)?;
    let pre_n = g.add(in_, gated)?;
    let n = g.tanh(pre_n);

    let step = g.sub(n, h)?;
    let moved = g.mul(u, step)?;
    let next = g.add(h, moved)?;
    if vector {
        g.reshape(next, &[dh])
    } else {
        Ok(next)
    }
}
