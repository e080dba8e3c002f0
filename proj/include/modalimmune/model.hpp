#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "linalg.hpp"
#include "spectral.hpp"

namespace modalimmune {

// ----- parameters ------------------------------------------------------------

struct ModelDims {
    std::size_t modalities = 3;
    std::vector<std::size_t> raw_dims = {12, 12, 12};
    std::size_t hidden = 16;
    std::size_t embed = 16;        // d
    std::size_t property_dim = 16; // d_p
    std::size_t fusion_out = 16;
    std::size_t classes = 2;
};

struct AffineBlock {
    Matrix w;  // out x in
    Vector b;  // out
};

struct EncoderParams {
    AffineBlock l1, l2;
};

// All learnable parameters: per-modality two-layer tanh encoders, one
// affine+tanh fusion hub over concatenated slots, an affine classifier,
// per-modality affine generators (other embeddings + property vector ->
// surrogate embedding), property vectors, and fusion mask tokens.
struct ModelParams {
    ModelDims dims;
    std::vector<EncoderParams> encoders;
    AffineBlock fusion;
    AffineBlock classifier;
    std::vector<AffineBlock> generators;
    std::vector<Vector> property_vectors;  // d_p each
    std::vector<Vector> mask_tokens;       // d each
};

inline std::size_t generator_input_dim(const ModelDims& dims) {
    return (dims.modalities - 1) * dims.embed + dims.property_dim;
}

inline ModelParams zeros_like_params(const ModelDims& dims) {
    ModelParams p;
    p.dims = dims;
    for (std::size_t m = 0; m < dims.modalities; ++m) {
        EncoderParams e;
        e.l1.w = Matrix(dims.hidden, dims.raw_dims[m]);
        e.l1.b = Vector(dims.hidden);
        e.l2.w = Matrix(dims.embed, dims.hidden);
        e.l2.b = Vector(dims.embed);
        p.encoders.push_back(std::move(e));
    }
    p.fusion.w = Matrix(dims.fusion_out, dims.modalities * dims.embed);
    p.fusion.b = Vector(dims.fusion_out);
    p.classifier.w = Matrix(dims.classes, dims.fusion_out);
    p.classifier.b = Vector(dims.classes);
    for (std::size_t m = 0; m < dims.modalities; ++m) {
        AffineBlock g;
        g.w = Matrix(dims.embed, generator_input_dim(dims));
        g.b = Vector(dims.embed);
        p.generators.push_back(std::move(g));
        p.property_vectors.emplace_back(dims.property_dim);
        p.mask_tokens.emplace_back(dims.embed);
    }
    return p;
}

inline ModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
    ModelParams p = zeros_like_params(dims);
    Rng rng(seed);
    auto fill_affine = [&rng](AffineBlock& blk) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(blk.w.cols()));
        for (double& x : blk.w.data()) x = rng.uniform(-bound, bound);
        for (double& x : blk.b.data()) x = rng.uniform(-bound, bound);
    };
    for (auto& e : p.encoders) {
        fill_affine(e.l1);
        fill_affine(e.l2);
    }
    fill_affine(p.fusion);
    fill_affine(p.classifier);
    for (auto& g : p.generators) fill_affine(g);
    for (auto& v : p.property_vectors)
        for (double& x : v.data()) x = rng.normal(0.0, 0.01);
    for (auto& v : p.mask_tokens)
        for (double& x : v.data()) x = rng.normal(0.0, 0.01);
    return p;
}

// ----- flat parameter view ---------------------------------------------------

struct ParamBlockInfo {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
    std::vector<std::size_t> shape;
};

struct ParamLayout {
    std::vector<ParamBlockInfo> blocks;
    std::size_t total = 0;

    const ParamBlockInfo& find(const std::string& name) const {
        for (const auto& b : blocks)
            if (b.name == name) return b;
        throw StructuralError("ParamLayout: unknown block " + name);
    }
};

inline ParamLayout param_layout(const ModelDims& dims) {
    ParamLayout layout;
    std::size_t off = 0;
    auto add = [&](const std::string& name, std::vector<std::size_t> shape) {
        std::size_t sz = 1;
        for (std::size_t s : shape) sz *= s;
        layout.blocks.push_back({name, off, sz, std::move(shape)});
        off += sz;
    };
    for (std::size_t m = 0; m < dims.modalities; ++m) {
        const std::string tag = "encoder" + std::to_string(m);
        add(tag + ".w1", {dims.hidden, dims.raw_dims[m]});
        add(tag + ".b1", {dims.hidden});
        add(tag + ".w2", {dims.embed, dims.hidden});
        add(tag + ".b2", {dims.embed});
    }
    add("fusion.w", {dims.fusion_out, dims.modalities * dims.embed});
    add("fusion.b", {dims.fusion_out});
    add("classifier.w", {dims.classes, dims.fusion_out});
    add("classifier.b", {dims.classes});
    for (std::size_t m = 0; m < dims.modalities; ++m) {
        const std::string tag = "generator" + std::to_string(m);
        add(tag + ".w", {dims.embed, generator_input_dim(dims)});
        add(tag + ".b", {dims.embed});
    }
    for (std::size_t m = 0; m < dims.modalities; ++m)
        add("property" + std::to_string(m), {dims.property_dim});
    for (std::size_t m = 0; m < dims.modalities; ++m)
        add("mask_token" + std::to_string(m), {dims.embed});
    layout.total = off;
    return layout;
}

// Contiguous flat span covering all four blocks of one encoder.
inline std::pair<std::size_t, std::size_t> encoder_span(const ModelDims& dims, std::size_t m) {
    const ParamLayout layout = param_layout(dims);
    const auto& first = layout.find("encoder" + std::to_string(m) + ".w1");
    const auto& last = layout.find("encoder" + std::to_string(m) + ".b2");
    return {first.offset, last.offset + last.size - first.offset};
}

inline Vector flatten_params(const ModelParams& p) {
    const ParamLayout layout = param_layout(p.dims);
    Vector flat(layout.total);
    std::size_t off = 0;
    auto put_matrix = [&](const Matrix& m) {
        for (double x : m.data()) flat[off++] = x;
    };
    auto put_vector = [&](const Vector& v) {
        for (std::size_t i = 0; i < v.dim(); ++i) flat[off++] = v[i];
    };
    for (const auto& e : p.encoders) {
        put_matrix(e.l1.w);
        put_vector(e.l1.b);
        put_matrix(e.l2.w);
        put_vector(e.l2.b);
    }
    put_matrix(p.fusion.w);
    put_vector(p.fusion.b);
    put_matrix(p.classifier.w);
    put_vector(p.classifier.b);
    for (const auto& g : p.generators) {
        put_matrix(g.w);
        put_vector(g.b);
    }
    for (const auto& v : p.property_vectors) put_vector(v);
    for (const auto& v : p.mask_tokens) put_vector(v);
    return flat;
}

inline ModelParams unflatten_params(const ModelDims& dims, const Vector& flat) {
    ModelParams p = zeros_like_params(dims);
    const ParamLayout layout = param_layout(dims);
    if (flat.dim() != layout.total)
        throw StructuralError("unflatten_params: flat size mismatch");
    std::size_t off = 0;
    auto get_matrix = [&](Matrix& m) {
        for (double& x : m.data()) x = flat[off++];
    };
    auto get_vector = [&](Vector& v) {
        for (std::size_t i = 0; i < v.dim(); ++i) v[i] = flat[off++];
    };
    for (auto& e : p.encoders) {
        get_matrix(e.l1.w);
        get_vector(e.l1.b);
        get_matrix(e.l2.w);
        get_vector(e.l2.b);
    }
    get_matrix(p.fusion.w);
    get_vector(p.fusion.b);
    get_matrix(p.classifier.w);
    get_vector(p.classifier.b);
    for (auto& g : p.generators) {
        get_matrix(g.w);
        get_vector(g.b);
    }
    for (auto& v : p.property_vectors) get_vector(v);
    for (auto& v : p.mask_tokens) get_vector(v);
    return p;
}

// ----- batches ---------------------------------------------------------------

// Boolean mask over (sample, modality) cells, row-major.
struct SlotMask {
    std::size_t n = 0, m = 0;
    std::vector<std::uint8_t> cells;

    SlotMask() = default;
    SlotMask(std::size_t n_, std::size_t m_, bool fill = true)
        : n(n_), m(m_), cells(n_ * m_, fill ? 1 : 0) {}
    bool at(std::size_t i, std::size_t mod) const { return cells[i * m + mod] != 0; }
    void set(std::size_t i, std::size_t mod, bool v) { cells[i * m + mod] = v ? 1 : 0; }
};

struct ModalityBatch {
    std::vector<Matrix> inputs;  // one n x raw_dim matrix per modality
    std::vector<int> labels;     // class indices
    SlotMask availability;       // n x M

    std::size_t size() const { return labels.size(); }
};

inline void validate_batch(const ModalityBatch& batch, const ModelDims& dims) {
    if (batch.inputs.size() != dims.modalities)
        throw StructuralError("batch: modality count mismatch");
    const std::size_t n = batch.size();
    for (std::size_t m = 0; m < dims.modalities; ++m) {
        if (batch.inputs[m].rows() != n)
            throw StructuralError("batch: row count mismatch in modality " + std::to_string(m));
        if (batch.inputs[m].cols() != dims.raw_dims[m])
            throw StructuralError("batch: raw dim mismatch in modality " + std::to_string(m));
    }
    if (batch.availability.n != n || batch.availability.m != dims.modalities)
        throw StructuralError("batch: availability shape mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        bool any = false;
        for (std::size_t m = 0; m < dims.modalities; ++m) any |= batch.availability.at(i, m);
        if (!any) throw StructuralError("batch: sample " + std::to_string(i) +
                                        " has no available modality");
        if (batch.labels[i] < 0 || batch.labels[i] >= static_cast<int>(dims.classes))
            throw StructuralError("batch: label out of range");
    }
}

// ----- forward passes --------------------------------------------------------

inline Matrix affine_forward(const Matrix& x, const AffineBlock& blk) {
    if (x.cols() != blk.w.cols()) throw StructuralError("affine: input dim mismatch");
    Matrix out(x.rows(), blk.w.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t o = 0; o < blk.w.rows(); ++o) {
            double s = blk.b[o];
            for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j) * blk.w(o, j);
            out(i, o) = s;
        }
    return out;
}

inline Matrix tanh_elementwise(const Matrix& x) {
    Matrix out = x;
    for (double& v : out.data()) v = std::tanh(v);
    return out;
}

struct EncoderCache {
    Matrix h1;  // tanh of first affine
    Matrix z;   // tanh of second affine
};

inline EncoderCache encode_one(const EncoderParams& enc, const Matrix& x) {
    EncoderCache c;
    c.h1 = tanh_elementwise(affine_forward(x, enc.l1));
    c.z = tanh_elementwise(affine_forward(c.h1, enc.l2));
    return c;
}

// Per-modality embeddings z^m = tanh(W2 tanh(W1 x + b1) + b2).
inline std::vector<Matrix> encode(const ModelParams& params, const ModalityBatch& batch) {
    validate_batch(batch, params.dims);
    std::vector<Matrix> out;
    for (std::size_t m = 0; m < params.dims.modalities; ++m)
        out.push_back(encode_one(params.encoders[m], batch.inputs[m]).z);
    return out;
}

// Fusion input with absent slots replaced by the modality's mask token.
// `override_slot` (optional) substitutes a fixed matrix into one slot, used by
// the collapsed-counterfactual fusion mode.
inline Matrix build_fusion_input(const ModelParams& params,
                                 const std::vector<Matrix>& embeddings,
                                 const SlotMask& slot_active,
                                 int override_modality = -1,
                                 const Matrix* override_value = nullptr) {
    const ModelDims& dims = params.dims;
    const std::size_t n = slot_active.n;
    Matrix fin(n, dims.modalities * dims.embed);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t m = 0; m < dims.modalities; ++m) {
            const std::size_t base = m * dims.embed;
            if (static_cast<int>(m) == override_modality && override_value != nullptr) {
                for (std::size_t j = 0; j < dims.embed; ++j)
                    fin(i, base + j) = (*override_value)(i, j);
            } else if (slot_active.at(i, m)) {
                for (std::size_t j = 0; j < dims.embed; ++j)
                    fin(i, base + j) = embeddings[m](i, j);
            } else {
                for (std::size_t j = 0; j < dims.embed; ++j)
                    fin(i, base + j) = params.mask_tokens[m][j];
            }
        }
    }
    return fin;
}

// Logits from embeddings under an availability mask. Every sample must have
// at least one active slot.
inline Matrix fuse_and_classify(const ModelParams& params, const std::vector<Matrix>& embeddings,
                                const SlotMask& slot_active) {
    for (std::size_t i = 0; i < slot_active.n; ++i) {
        bool any = false;
        for (std::size_t m = 0; m < slot_active.m; ++m) any |= slot_active.at(i, m);
        if (!any)
            throw StructuralError("fuse_and_classify: sample with all modalities absent");
    }
    const Matrix fin = build_fusion_input(params, embeddings, slot_active);
    const Matrix u = tanh_elementwise(affine_forward(fin, params.fusion));
    return affine_forward(u, params.classifier);
}

// Surrogate embedding for `target` from the other modalities' embeddings and
// the target's property vector.
inline Matrix generate_missing(const ModelParams& params, const std::vector<Matrix>& embeddings,
                               std::size_t target) {
    const ModelDims& dims = params.dims;
    if (target >= dims.modalities) throw StructuralError("generate_missing: bad target");
    if (dims.modalities < 2)
        throw StructuralError("generate_missing: no source modality");
    const std::size_t n = embeddings[0].rows();
    Matrix gin(n, generator_input_dim(dims));
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t col = 0;
        for (std::size_t m = 0; m < dims.modalities; ++m) {
            if (m == target) continue;
            for (std::size_t j = 0; j < dims.embed; ++j) gin(i, col++) = embeddings[m](i, j);
        }
        for (std::size_t j = 0; j < dims.property_dim; ++j)
            gin(i, col++) = params.property_vectors[target][j];
    }
    return affine_forward(gin, params.generators[target]);
}

// ----- losses and manual backpropagation -------------------------------------

struct LossWeights {
    double alpha = 1.0;   // reconstruction
    double beta = 0.1;    // property
    double gamma = 0.1;   // contrastive
    double lambda = 0.5;  // collapse
    double eta = 0.1;     // stable-rank penalty inside the collapse term
};

enum class TrainMode { Reconstruction, Sdl };

enum class SdlFusionMode { MaskToken, CollapsedEmbedding };

struct ModeSpec {
    TrainMode kind = TrainMode::Reconstruction;
    int m_star = -1;                      // SDL target modality
    SlotMask recon_mask;                  // reconstruction-phase hidden slots
    const CollapseSample* collapse = nullptr;
    SdlFusionMode sdl_fusion = SdlFusionMode::MaskToken;
    // Test hook: frozen reconstruction targets (detached embeddings computed
    // at a base point) so finite differences see the same objective the
    // analytic gradient differentiates.
    const std::vector<Matrix>* recon_targets_override = nullptr;
};

struct LossBreakdown {
    double task = 0.0;
    double recon = 0.0;
    double property = 0.0;
    double contrastive = 0.0;
    double collapse = 0.0;
    double total = 0.0;
};

namespace detail {

inline void affine_backward(const Matrix& x, const AffineBlock& blk, const Matrix& dout,
                            AffineBlock& grad, Matrix* dx) {
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t o = 0; o < blk.w.rows(); ++o) {
            const double g = dout(i, o);
            if (g == 0.0) continue;
            grad.b[o] += g;
            for (std::size_t j = 0; j < x.cols(); ++j) grad.w(o, j) += g * x(i, j);
        }
    if (dx != nullptr) {
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t o = 0; o < blk.w.rows(); ++o) {
                const double g = dout(i, o);
                if (g == 0.0) continue;
                for (std::size_t j = 0; j < x.cols(); ++j) (*dx)(i, j) += g * blk.w(o, j);
            }
    }
}

inline Matrix tanh_backward(const Matrix& activated, const Matrix& dout) {
    Matrix din = dout;
    for (std::size_t i = 0; i < din.data().size(); ++i)
        din.data()[i] *= 1.0 - activated.data()[i] * activated.data()[i];
    return din;
}

inline void encoder_backward(const EncoderParams& enc, const Matrix& x, const EncoderCache& cache,
                             const Matrix& dz, EncoderParams& grad) {
    const Matrix da2 = tanh_backward(cache.z, dz);
    Matrix dh1(cache.h1.rows(), cache.h1.cols());
    affine_backward(cache.h1, enc.l2, da2, grad.l2, &dh1);
    const Matrix da1 = tanh_backward(cache.h1, dh1);
    affine_backward(x, enc.l1, da1, grad.l1, nullptr);
}

inline Matrix softmax_rows(const Matrix& logits) {
    Matrix p = logits;
    for (std::size_t i = 0; i < p.rows(); ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < p.cols(); ++j) mx = std::max(mx, p(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < p.cols(); ++j) {
            p(i, j) = std::exp(p(i, j) - mx);
            sum += p(i, j);
        }
        for (std::size_t j = 0; j < p.cols(); ++j) p(i, j) /= sum;
    }
    return p;
}

}  // namespace detail

struct LossResult {
    LossBreakdown breakdown;
    ModelParams grads;                 // same shape as the parameters
    std::vector<Matrix> embeddings;    // per-modality z for diagnostics
    std::vector<double> task_per_sample;
};

// Composite objective with full manual backpropagation.
//
// reconstruction mode:
//   task(active slots) + alpha * recon + beta * property + gamma * contrastive
// SDL mode (m* selected):
//   task(slots minus m*) + gamma * contrastive(non-m* pairs)
//   + lambda * [mse-to-noise + eta * stable_rank]
// Generators and property vectors receive no gradient in SDL mode; the only
// m*-encoder gradient flows through the collapse term.
inline LossResult compute_losses(const ModelParams& params, const ModalityBatch& batch,
                                 const ModeSpec& mode, const LossWeights& weights) {
    validate_batch(batch, params.dims);
    const ModelDims& dims = params.dims;
    const std::size_t n = batch.size();
    const std::size_t m_count = dims.modalities;
    const bool sdl = mode.kind == TrainMode::Sdl;

    if (sdl) {
        if (mode.m_star < 0 || mode.m_star >= static_cast<int>(m_count))
            throw StructuralError("compute_losses: SDL mode needs a valid m_star");
        if (mode.collapse == nullptr)
            throw StructuralError("compute_losses: SDL mode needs a collapse sample");
    } else {
        if (mode.recon_mask.n != n || mode.recon_mask.m != m_count)
            throw StructuralError("compute_losses: reconstruction mask shape mismatch");
    }

    LossResult result;
    result.grads = zeros_like_params(dims);

    // encoders forward
    std::vector<EncoderCache> caches;
    for (std::size_t m = 0; m < m_count; ++m)
        caches.push_back(encode_one(params.encoders[m], batch.inputs[m]));
    for (const auto& c : caches) result.embeddings.push_back(c.z);

    // active fusion slots
    SlotMask active(n, m_count, false);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < m_count; ++m) {
            bool a = batch.availability.at(i, m);
            if (sdl) {
                if (static_cast<int>(m) == mode.m_star) a = false;
            } else {
                if (mode.recon_mask.at(i, m)) a = false;
            }
            active.set(i, m, a);
        }
    for (std::size_t i = 0; i < n; ++i) {
        bool any = false;
        for (std::size_t m = 0; m < m_count; ++m) any |= active.at(i, m);
        if (!any)
            throw StructuralError("compute_losses: sample left with no active modality");
    }

    const bool collapsed_feed =
        sdl && mode.sdl_fusion == SdlFusionMode::CollapsedEmbedding;
    const Matrix* override_value = collapsed_feed ? &mode.collapse->epsilon : nullptr;
    const int override_modality = collapsed_feed ? mode.m_star : -1;

    const Matrix fin =
        build_fusion_input(params, result.embeddings, active, override_modality, override_value);
    const Matrix u = tanh_elementwise(affine_forward(fin, params.fusion));
    const Matrix logits = affine_forward(u, params.classifier);

    // task: mean cross-entropy
    const Matrix probs = detail::softmax_rows(logits);
    double task = 0.0;
    result.task_per_sample.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double p = std::max(probs(i, batch.labels[i]), 1e-300);
        result.task_per_sample[i] = -std::log(p);
        task += result.task_per_sample[i];
    }
    task /= static_cast<double>(n);
    result.breakdown.task = task;

    // accumulated dL/dZ per modality
    std::vector<Matrix> dz(m_count, Matrix(n, dims.embed));

    // ---- task backward
    Matrix dlogits = probs;
    for (std::size_t i = 0; i < n; ++i) dlogits(i, batch.labels[i]) -= 1.0;
    dlogits *= 1.0 / static_cast<double>(n);

    Matrix du(n, dims.fusion_out);
    detail::affine_backward(u, params.classifier, dlogits, result.grads.classifier, &du);
    const Matrix daf = detail::tanh_backward(u, du);
    Matrix dfin(n, m_count * dims.embed);
    detail::affine_backward(fin, params.fusion, daf, result.grads.fusion, &dfin);

    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < m_count; ++m) {
            const std::size_t base = m * dims.embed;
            if (static_cast<int>(m) == override_modality) continue;  // constant feed
            if (active.at(i, m)) {
                for (std::size_t j = 0; j < dims.embed; ++j)
                    dz[m](i, j) += dfin(i, base + j);
            } else {
                for (std::size_t j = 0; j < dims.embed; ++j)
                    result.grads.mask_tokens[m][j] += dfin(i, base + j);
            }
        }

    // ---- reconstruction (generators; reconstruction mode only)
    if (!sdl && weights.alpha != 0.0) {
        // hidden-and-available slots are the reconstruction targets
        std::vector<std::pair<std::size_t, std::size_t>> targets;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t m = 0; m < m_count; ++m)
                if (batch.availability.at(i, m) && mode.recon_mask.at(i, m))
                    targets.emplace_back(i, m);
        if (!targets.empty()) {
            const double inv = 1.0 / static_cast<double>(targets.size());
            // generator source: active slot embedding, mask token otherwise
            for (std::size_t m = 0; m < m_count; ++m) {
                std::vector<std::size_t> rows;
                for (const auto& [i, mm] : targets)
                    if (mm == m) rows.push_back(i);
                if (rows.empty()) continue;

                const std::size_t gin_dim = generator_input_dim(dims);
                Matrix gin(rows.size(), gin_dim);
                for (std::size_t r = 0; r < rows.size(); ++r) {
                    const std::size_t i = rows[r];
                    std::size_t col = 0;
                    for (std::size_t src = 0; src < m_count; ++src) {
                        if (src == m) continue;
                        if (active.at(i, src)) {
                            for (std::size_t j = 0; j < dims.embed; ++j)
                                gin(r, col++) = caches[src].z(i, j);
                        } else {
                            for (std::size_t j = 0; j < dims.embed; ++j)
                                gin(r, col++) = params.mask_tokens[src][j];
                        }
                    }
                    for (std::size_t j = 0; j < dims.property_dim; ++j)
                        gin(r, col++) = params.property_vectors[m][j];
                }
                const Matrix zhat = affine_forward(gin, params.generators[m]);

                Matrix dzhat(rows.size(), dims.embed);
                for (std::size_t r = 0; r < rows.size(); ++r) {
                    const std::size_t i = rows[r];
                    for (std::size_t j = 0; j < dims.embed; ++j) {
                        const double target =
                            mode.recon_targets_override != nullptr
                                ? (*mode.recon_targets_override)[m](i, j)
                                : caches[m].z(i, j);
                        const double diff = zhat(r, j) - target;
                        result.breakdown.recon += inv * diff * diff;
                        dzhat(r, j) = weights.alpha * inv * 2.0 * diff;
                    }
                }
                Matrix dgin(rows.size(), gin_dim);
                detail::affine_backward(gin, params.generators[m], dzhat,
                                        result.grads.generators[m], &dgin);
                for (std::size_t r = 0; r < rows.size(); ++r) {
                    const std::size_t i = rows[r];
                    std::size_t col = 0;
                    for (std::size_t src = 0; src < m_count; ++src) {
                        if (src == m) continue;
                        if (active.at(i, src)) {
                            for (std::size_t j = 0; j < dims.embed; ++j)
                                dz[src](i, j) += dgin(r, col++);
                        } else {
                            for (std::size_t j = 0; j < dims.embed; ++j)
                                result.grads.mask_tokens[src][j] += dgin(r, col++);
                        }
                    }
                    for (std::size_t j = 0; j < dims.property_dim; ++j)
                        result.grads.property_vectors[m][j] += dgin(r, col++);
                }
            }
        }
    }

    // ---- property loss (reconstruction mode only)
    if (!sdl && weights.beta != 0.0) {
        for (std::size_t m = 0; m < m_count; ++m) {
            std::vector<std::size_t> avail;
            for (std::size_t i = 0; i < n; ++i)
                if (batch.availability.at(i, m)) avail.push_back(i);
            if (avail.empty()) continue;
            Vector mean(dims.embed);
            for (std::size_t i : avail)
                for (std::size_t j = 0; j < dims.embed; ++j) mean[j] += caches[m].z(i, j);
            mean *= 1.0 / static_cast<double>(avail.size());

            if (dims.property_dim != dims.embed)
                throw StructuralError("property loss requires property_dim == embed dim");
            double term = 0.0;
            Vector diff(dims.embed);
            for (std::size_t j = 0; j < dims.embed; ++j) {
                diff[j] = mean[j] - params.property_vectors[m][j];
                term += diff[j] * diff[j];
            }
            result.breakdown.property += term / static_cast<double>(m_count);

            const double scale = weights.beta * 2.0 / static_cast<double>(m_count);
            for (std::size_t j = 0; j < dims.embed; ++j) {
                result.grads.property_vectors[m][j] -= scale * diff[j];
                const double per_sample = scale * diff[j] / static_cast<double>(avail.size());
                for (std::size_t i : avail) dz[m](i, j) += per_sample;
            }
        }
    }

    // ---- contrastive alignment (symmetric InfoNCE, temperature 0.1)
    if (weights.gamma != 0.0) {
        const double temp = 0.1;
        // eligible modalities: all in reconstruction mode, non-m* in SDL mode
        std::vector<std::size_t> mods;
        for (std::size_t m = 0; m < m_count; ++m)
            if (!sdl || static_cast<int>(m) != mode.m_star) mods.push_back(m);

        // row normalization cache
        std::vector<Matrix> zn(m_count);
        std::vector<std::vector<double>> row_norm(m_count, std::vector<double>(n, 0.0));
        for (std::size_t m : mods) {
            zn[m] = caches[m].z;
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < dims.embed; ++j)
                    s += caches[m].z(i, j) * caches[m].z(i, j);
                row_norm[m][i] = std::max(std::sqrt(s), 1e-12);
                for (std::size_t j = 0; j < dims.embed; ++j) zn[m](i, j) /= row_norm[m][i];
            }
        }
        std::vector<Matrix> dzn(m_count);
        for (std::size_t m : mods) dzn[m] = Matrix(n, dims.embed);

        struct Direction {
            std::size_t a, b;
            std::vector<std::size_t> samples;
        };
        std::vector<Direction> dirs;
        for (std::size_t a : mods)
            for (std::size_t b : mods) {
                if (a == b) continue;
                Direction dir{a, b, {}};
                for (std::size_t i = 0; i < n; ++i)
                    if (batch.availability.at(i, a) && batch.availability.at(i, b))
                        dir.samples.push_back(i);
                if (dir.samples.size() >= 2) dirs.push_back(std::move(dir));
            }

        if (!dirs.empty()) {
            const double dir_w = 1.0 / static_cast<double>(dirs.size());
            for (const auto& dir : dirs) {
                const auto& s = dir.samples;
                const double inv = 1.0 / static_cast<double>(s.size());
                for (std::size_t ii = 0; ii < s.size(); ++ii) {
                    const std::size_t i = s[ii];
                    // logits over candidates j
                    std::vector<double> sims(s.size());
                    double mx = -1e300;
                    for (std::size_t jj = 0; jj < s.size(); ++jj) {
                        double dot = 0.0;
                        for (std::size_t k = 0; k < dims.embed; ++k)
                            dot += zn[dir.a](i, k) * zn[dir.b](s[jj], k);
                        sims[jj] = dot / temp;
                        mx = std::max(mx, sims[jj]);
                    }
                    double denom = 0.0;
                    for (double v : sims) denom += std::exp(v - mx);
                    result.breakdown.contrastive +=
                        dir_w * inv * (-(sims[ii] - mx) + std::log(denom));
                    for (std::size_t jj = 0; jj < s.size(); ++jj) {
                        const double p = std::exp(sims[jj] - mx) / denom;
                        const double g =
                            weights.gamma * dir_w * inv * (p - (jj == ii ? 1.0 : 0.0)) / temp;
                        if (g == 0.0) continue;
                        for (std::size_t k = 0; k < dims.embed; ++k) {
                            dzn[dir.a](i, k) += g * zn[dir.b](s[jj], k);
                            dzn[dir.b](s[jj], k) += g * zn[dir.a](i, k);
                        }
                    }
                }
            }
            // through the row normalization: dz = (dzn - zn <zn, dzn>) / ||z||
            for (std::size_t m : mods) {
                for (std::size_t i = 0; i < n; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < dims.embed; ++j)
                        dot += zn[m](i, j) * dzn[m](i, j);
                    for (std::size_t j = 0; j < dims.embed; ++j)
                        dz[m](i, j) += (dzn[m](i, j) - zn[m](i, j) * dot) / row_norm[m][i];
                }
            }
        }
    }

    // ---- collapse (SDL only)
    if (sdl) {
        const CollapseValue cv =
            collapse_loss(caches[mode.m_star].z, weights.eta, *mode.collapse);
        result.breakdown.collapse = cv.loss;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < dims.embed; ++j)
                dz[mode.m_star](i, j) += weights.lambda * cv.grad_z(i, j);
    }

    // ---- encoder backward
    for (std::size_t m = 0; m < m_count; ++m)
        detail::encoder_backward(params.encoders[m], batch.inputs[m], caches[m], dz[m],
                                 result.grads.encoders[m]);

    result.breakdown.total = result.breakdown.task + weights.alpha * result.breakdown.recon +
                             weights.beta * result.breakdown.property +
                             weights.gamma * result.breakdown.contrastive +
                             (sdl ? weights.lambda * result.breakdown.collapse : 0.0);
    return result;
}

}  // namespace modalimmune
