#pragma once

#include <vector>

#include "tripcast/linalg.hpp"
#include "tripcast/model.hpp"

namespace tripcast {

namespace detail {

/// Backward through y = layer_norm(x) given upstream dy. Accumulates gamma and
/// beta gradients, returns dx.
template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& hat, const Vec<T>& inv_std,
                           const Mat<T>& gamma, Mat<T>& dgamma, Mat<T>& dbeta) {
    dgamma.row(0) += dy.cwiseProduct(hat).colwise().sum();
    dbeta.row(0) += dy.colwise().sum();
    Mat<T> dhat = dy * gamma.row(0).asDiagonal();
    Mat<T> dx(dy.rows(), dy.cols());
    const T inv_d = T(1) / T(dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const T mean_dhat = dhat.row(r).mean();
        const T mean_dhat_hat = dhat.row(r).cwiseProduct(hat.row(r)).sum() * inv_d;
        dx.row(r) = inv_std(r) * (dhat.row(r).array() - mean_dhat -
                                  hat.row(r).array() * mean_dhat_hat);
    }
    return dx;
}

/// Backward through one encoder block; returns the gradient w.r.t. the block
/// input and accumulates parameter gradients.
template <class T>
Mat<T> encoder_layer_backward(const Mat<T>& dout, const EncoderLayerCache<T>& cc,
                              const typename ParameterStore<T>::Layer& layer,
                              const ModelConfig& cfg,
                              typename ParameterStore<T>::Layer& grads) {
    const int heads = cfg.num_heads, dh = cfg.head_dim();
    const T scale = static_cast<T>(1.0 / std::sqrt(double(dh)));
    const bool dropped = !cc.attn_drop.empty();

    // out = LayerNorm(z3 + z2)
    Mat<T> dsum2 = layer_norm_backward(dout, cc.hat2, cc.inv_std2, layer.norm2_gamma,
                                       grads.norm2_gamma, grads.norm2_beta);

    // z3 = Dropout(GELU(z2 W1 + b1)) W2 + b2, residual from z2
    Mat<T> dz2 = dsum2;
    grads.w2.noalias() += cc.ff_act.transpose() * dsum2;
    grads.b2.row(0) += dsum2.colwise().sum();
    Mat<T> dff_act = dsum2 * layer.w2.transpose();
    if (cc.ff_drop.size() > 0) dff_act = dff_act.cwiseProduct(cc.ff_drop);
    Mat<T> dff_pre =
        dff_act.cwiseProduct(cc.ff_pre.unaryExpr([](T x) { return gelu_grad(x); }));
    grads.w1.noalias() += cc.z2.transpose() * dff_pre;
    grads.b1.row(0) += dff_pre.colwise().sum();
    dz2.noalias() += dff_pre * layer.w1.transpose();

    // z2 = LayerNorm(z1 + z)
    Mat<T> dsum1 = layer_norm_backward(dz2, cc.hat1, cc.inv_std1, layer.norm1_gamma,
                                       grads.norm1_gamma, grads.norm1_beta);

    // z1 = MultiHeadAttention(z), residual from z
    Mat<T> dinput = dsum1;
    grads.wo.noalias() += cc.heads.transpose() * dsum1;
    grads.bo.row(0) += dsum1.colwise().sum();
    Mat<T> dheads = dsum1 * layer.wo.transpose();

    Mat<T> dq(dout.rows(), cfg.d_model), dk(dout.rows(), cfg.d_model),
        dv(dout.rows(), cfg.d_model);
    for (int h = 0; h < heads; ++h) {
        const Mat<T>& attn = cc.attn[h];
        auto dheads_h = dheads.middleCols(h * dh, dh);
        Mat<T> deff(attn.rows(), attn.cols());
        deff.noalias() = dheads_h * cc.v.middleCols(h * dh, dh).transpose();
        if (dropped) {
            dv.middleCols(h * dh, dh).noalias() =
                attn.cwiseProduct(cc.attn_drop[h]).transpose() * dheads_h;
            deff = deff.cwiseProduct(cc.attn_drop[h]);
        } else {
            dv.middleCols(h * dh, dh).noalias() = attn.transpose() * dheads_h;
        }
        // softmax backward: dS = A .* (dA - rowsum(dA .* A))
        Vec<T> row_dot = deff.cwiseProduct(attn).rowwise().sum();
        Mat<T> dscores = deff;
        dscores.colwise() -= row_dot;
        dscores = dscores.cwiseProduct(attn) * scale;
        dq.middleCols(h * dh, dh).noalias() = dscores * cc.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() =
            dscores.transpose() * cc.q.middleCols(h * dh, dh);
    }

    grads.wq.noalias() += cc.input.transpose() * dq;
    grads.bq.row(0) += dq.colwise().sum();
    grads.wk.noalias() += cc.input.transpose() * dk;
    grads.bk.row(0) += dk.colwise().sum();
    grads.wv.noalias() += cc.input.transpose() * dv;
    grads.bv.row(0) += dv.colwise().sum();

    dinput.noalias() += dq * layer.wq.transpose();
    dinput.noalias() += dk * layer.wk.transpose();
    dinput.noalias() += dv * layer.wv.transpose();
    return dinput;
}

}  // namespace detail

/// Reverse-mode differentiation of the full forward pipeline. `dpred` is the
/// loss gradient w.r.t. the denormalized H x C prediction; parameter gradients
/// are accumulated into `grads` (which must be shaped like the parameters).
/// Normalization statistics depend only on the input data, never on the
/// parameters, so no gradient flows through them.
template <class T>
void backward(const Mat<T>& dpred, const ForwardCache<T>& cache,
              const ParameterStore<T>& params, const ModelConfig& cfg,
              ParameterStore<T>& grads) {
    const int P = cfg.patch_size;
    const int grid_w = cfg.C / P;

    // pred = pred_norm * stdev + mean
    Mat<T> dpred_norm = dpred * cache.stats.stdev;

    // reconstruct: flat = enc_out * recon_w + recon_b, then unflatten
    Mat<T> dflat(cfg.tokens(), cfg.patch_out());
    for (int token = 0; token < cfg.tokens(); ++token) {
        const int pr = token / grid_w, pc = token % grid_w;
        for (int u = 0; u < P; ++u) {
            for (int v = 0; v < P; ++v) {
                dflat(token, u * P + v) = dpred_norm(pr * P + u, pc * P + v);
            }
        }
    }
    grads.recon_w.noalias() += cache.enc_out.transpose() * dflat;
    grads.recon_b.row(0) += dflat.colwise().sum();
    Mat<T> dtokens = dflat * params.recon_w.transpose();

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        dtokens = detail::encoder_layer_backward(dtokens, cache.layers[l],
                                                 params.layers[l], cfg, grads.layers[l]);
    }

    if (cfg.pe_mode == PeMode::learned) grads.pos_table += dtokens;

    // patch embedding: tokens0 = patches * patch_w + patch_b (+ PE)
    grads.patch_w.noalias() += cache.patches.transpose() * dtokens;
    grads.patch_b.row(0) += dtokens.colwise().sum();
    Mat<T> dpatches = dtokens * params.patch_w.transpose();

    Mat<T> dlatent(static_cast<Eigen::Index>(cfg.H) * cfg.C, cfg.d_model);
    for (int token = 0; token < cfg.tokens(); ++token) {
        const int pr = token / grid_w, pc = token % grid_w;
        for (int u = 0; u < P; ++u) {
            const Eigen::Index cell0 = static_cast<Eigen::Index>(pr * P + u) * cfg.C + pc * P;
            for (int v = 0; v < P; ++v) {
                dlatent.row(cell0 + v) = dpatches.row(token).segment((u * P + v) * cfg.d_model,
                                                                     cfg.d_model);
            }
        }
    }

    // mask token substitution: masked cells' gradient goes to the token, and
    // nothing flows to the input projection for those cells.
    for (int r = 0; r < cfg.H; ++r) {
        for (int c = 0; c < cfg.C; ++c) {
            if (cache.mask.at(r, c)) {
                const Eigen::Index cell = static_cast<Eigen::Index>(r) * cfg.C + c;
                grads.mask_token.row(0) += dlatent.row(cell);
                dlatent.row(cell).setZero();
            }
        }
    }

    // input projection: latent = [value; covariates] * input_w + input_b
    const Eigen::Index cells = static_cast<Eigen::Index>(cfg.H) * cfg.C;
    grads.input_w.row(0).noalias() +=
        Eigen::Map<const Vec<T>>(cache.values_norm.data(), cells).transpose() * dlatent;
    if (cfg.covariate_channels > 0) {
        grads.input_w.bottomRows(cfg.covariate_channels).noalias() +=
            cache.covariates.transpose() * dlatent;
    }
    grads.input_b.row(0) += dlatent.colwise().sum();
}

}  // namespace tripcast
