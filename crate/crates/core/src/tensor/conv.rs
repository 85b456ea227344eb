use super::{check_activation, nchw_index, Element, Tape, Tensor};
use crate::error::{Error, Result};

/// 2-D convolution attributes. Weights are laid out (C_out, C_in/groups, k, k).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvAttrs {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvAttrs {
    fn default() -> Self {
        ConvAttrs { stride: 1, pad: 0, dilation: 1, groups: 1 }
    }
}

/// c[m×n] += a[m×k] · b[k×n]
fn gemm<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ  (b given row-major, used against its rows)
fn gemm_abt<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for kk in 0..k {
                acc = acc + arow[kk] * brow[kk];
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cig: usize,  // input channels per group
    cog: usize,  // output channels per group
    rows: usize, // im2col rows = cig·kh·kw
}

/// Unrolls one (sample, group) into `col` (rows × oh·ow); padding cells are 0.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(xd: &[E], d: &ConvDims, attrs: ConvAttrs, ni: usize, gi: usize, col: &mut [E]) {
    let ohw = d.oh * d.ow;
    col.fill(E::zero());
    for cl in 0..d.cig {
        let ci = gi * d.cig + cl;
        for di in 0..d.kh {
            for dj in 0..d.kw {
                let r = (cl * d.kh + di) * d.kw + dj;
                let dest = &mut col[r * ohw..(r + 1) * ohw];
                for oi in 0..d.oh {
                    let ih = (oi * attrs.stride + di * attrs.dilation) as isize - attrs.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    for oj in 0..d.ow {
                        let iw = (oj * attrs.stride + dj * attrs.dilation) as isize - attrs.pad as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        dest[oi * d.ow + oj] =
                            xd[nchw_index(d.cin, d.h, d.w, ni, ci, ih as usize, iw as usize)];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column buffer back to input layout (adjoint of im2col).
fn col2im_add<E: Element>(dcol: &[E], d: &ConvDims, attrs: ConvAttrs, ni: usize, gi: usize, dx: &mut [E]) {
    let ohw = d.oh * d.ow;
    for cl in 0..d.cig {
        let ci = gi * d.cig + cl;
        for di in 0..d.kh {
            for dj in 0..d.kw {
                let r = (cl * d.kh + di) * d.kw + dj;
                let src = &dcol[r * ohw..(r + 1) * ohw];
                for oi in 0..d.oh {
                    let ih = (oi * attrs.stride + di * attrs.dilation) as isize - attrs.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    for oj in 0..d.ow {
                        let iw = (oj * attrs.stride + dj * attrs.dilation) as isize - attrs.pad as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        let idx = nchw_index(d.cin, d.h, d.w, ni, ci, ih as usize, iw as usize);
                        dx[idx] = dx[idx] + src[oi * d.ow + oj];
                    }
                }
            }
        }
    }
}

impl<E: Element> Tape<E> {
    /// 2-D convolution (no bias — normalization layers follow every conv in
    /// this code base). Depthwise convolution is `groups == in-channels`.
    pub fn conv2d(&self, x: &Tensor<E>, weight: &Tensor<E>, attrs: ConvAttrs) -> Result<Tensor<E>> {
        let (n, cin, h, w) = check_activation("conv2d", x)?;
        let ws = weight.shape();
        if ws.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight must be rank 4, got {:?}", ws),
            });
        }
        if attrs.stride == 0 || attrs.dilation == 0 || attrs.groups == 0 {
            return Err(Error::InvalidAttr {
                op: "conv2d",
                detail: format!(
                    "stride {}, dilation {}, groups {} must all be >= 1",
                    attrs.stride, attrs.dilation, attrs.groups
                ),
            });
        }
        let (cout, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin % attrs.groups != 0 || cout % attrs.groups != 0 {
            return Err(Error::InvalidAttr {
                op: "conv2d",
                detail: format!("groups {} must divide in {} and out {} channels", attrs.groups, cin, cout),
            });
        }
        if wc != cin / attrs.groups {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight expects {} input channels per group, input provides {}", wc, cin / attrs.groups),
            });
        }
        let eff_kh = attrs.dilation * (kh - 1) + 1;
        let eff_kw = attrs.dilation * (kw - 1) + 1;
        if kh == 0 || kw == 0 || h + 2 * attrs.pad < eff_kh || w + 2 * attrs.pad < eff_kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "effective kernel {}x{} exceeds padded input {}x{}",
                    eff_kh, eff_kw, h + 2 * attrs.pad, w + 2 * attrs.pad
                ),
            });
        }
        let oh = (h + 2 * attrs.pad - eff_kh) / attrs.stride + 1;
        let ow = (w + 2 * attrs.pad - eff_kw) / attrs.stride + 1;
        let d = ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            cig: cin / attrs.groups,
            cog: cout / attrs.groups,
            rows: (cin / attrs.groups) * kh * kw,
        };
        let ohw = oh * ow;
        let mut data = vec![E::zero(); n * cout * ohw];
        {
            let xd = x.data();
            let wd = weight.data();
            let mut col = vec![E::zero(); d.rows * ohw];
            for ni in 0..n {
                for gi in 0..attrs.groups {
                    im2col(&xd, &d, attrs, ni, gi, &mut col);
                    let wslice = &wd[gi * d.cog * d.rows..(gi + 1) * d.cog * d.rows];
                    let base = nchw_index(cout, oh, ow, ni, gi * d.cog, 0, 0);
                    gemm(d.cog, d.rows, ohw, wslice, &col, &mut data[base..base + d.cog * ohw]);
                }
            }
        }
        let out = Tensor::from_vec(vec![n, cout, oh, ow], data)?;
        let track = x.requires_grad_flag() || weight.requires_grad_flag();
        let (xc, wgt, oc) = (x.clone(), weight.clone(), out.clone());
        self.finish("conv2d", &out, track, move || {
            let Some(g) = oc.grad() else { return };
            let ohw = d.oh * d.ow;
            let groups = attrs.groups;
            if wgt.requires_grad_flag() {
                // dW_g = G_g · colᵀ, with the column buffer rebuilt on the fly.
                let xd = xc.data();
                let mut dw = vec![E::zero(); wgt.numel()];
                let mut col = vec![E::zero(); d.rows * ohw];
                for ni in 0..d.n {
                    for gi in 0..groups {
                        im2col(&xd, &d, attrs, ni, gi, &mut col);
                        let gbase = nchw_index(d.cout, d.oh, d.ow, ni, gi * d.cog, 0, 0);
                        gemm_abt(
                            d.cog,
                            ohw,
                            d.rows,
                            &g[gbase..gbase + d.cog * ohw],
                            &col,
                            &mut dw[gi * d.cog * d.rows..(gi + 1) * d.cog * d.rows],
                        );
                    }
                }
                drop(xd);
                wgt.accumulate_grad(&dw);
            }
            if xc.requires_grad_flag() {
                // dcol = W_gᵀ · G_g, then scattered back through the im2col map.
                let wd = wgt.data();
                let mut dx = vec![E::zero(); xc.numel()];
                let mut dcol = vec![E::zero(); d.rows * ohw];
                for ni in 0..d.n {
                    for gi in 0..groups {
                        dcol.fill(E::zero());
                        let gbase = nchw_index(d.cout, d.oh, d.ow, ni, gi * d.cog, 0, 0);
                        let gslice = &g[gbase..gbase + d.cog * ohw];
                        let wslice = &wd[gi * d.cog * d.rows..(gi + 1) * d.cog * d.rows];
                        for co in 0..d.cog {
                            let grow = &gslice[co * ohw..(co + 1) * ohw];
                            let wrow = &wslice[co * d.rows..(co + 1) * d.rows];
                            for (r, &wv) in wrow.iter().enumerate() {
                                let drow = &mut dcol[r * ohw..(r + 1) * ohw];
                                for q in 0..ohw {
                                    drow[q] = drow[q] + wv * grow[q];
                                }
                            }
                        }
                        col2im_add(&dcol, &d, attrs, ni, gi, &mut dx);
                    }
                }
                drop(wd);
                xc.accumulate_grad(&dx);
            }
        })?;
        Ok(out)
    }
}
