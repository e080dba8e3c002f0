#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "model.hpp"

namespace modalimmune {

// ----- synthetic multimodal generator -------------------------------------------

struct SynthSpec {
    std::size_t n_samples = 600;
    std::size_t classes = 2;                      // 2 or 7
    std::vector<std::size_t> modal_dims = {12, 12, 12};
    std::vector<double> snr = {1.5, 1.0, 0.7};    // 0 means pure noise
    std::size_t latent_dim = 8;
    std::optional<std::size_t> destructive_modality;
    double destructive_strength = 0.5;            // label-anticorrelated mixing weight
    std::uint64_t seed = 0;
};

inline void validate_spec(const SynthSpec& spec) {
    if (spec.classes != 2 && spec.classes != 7)
        throw StructuralError("SynthSpec: classes must be 2 or 7");
    if (spec.modal_dims.empty()) throw StructuralError("SynthSpec: no modalities");
    if (spec.modal_dims.size() != spec.snr.size())
        throw StructuralError("SynthSpec: snr count mismatch");
    bool informative = false;
    for (double s : spec.snr) {
        if (s < 0.0) throw StructuralError("SynthSpec: snr < 0");
        informative |= s > 0.0;
    }
    if (!informative) throw StructuralError("SynthSpec: need at least one snr > 0");
    for (std::size_t d : spec.modal_dims)
        if (d < 1) throw StructuralError("SynthSpec: modality dim < 1");
    if (spec.latent_dim < spec.classes)
        throw StructuralError("SynthSpec: latent_dim must be >= classes");
    if (spec.destructive_modality && *spec.destructive_modality >= spec.modal_dims.size())
        throw StructuralError("SynthSpec: destructive modality out of range");
}

struct Dataset {
    ModalityBatch train, val, test;
    SynthSpec spec;
};

// Latent-factor generator: h ~ N(mu_y, I); x^m = A_m h + b_m + noise/snr_m.
// A destructive modality mixes in the flipped-label latent at the configured
// strength. Splits are stratified 70/15/15, deterministic in the seed.
inline Dataset generate_dataset(const SynthSpec& spec) {
    validate_spec(spec);
    const std::size_t m_count = spec.modal_dims.size();
    Rng rng(derive_seed(spec.seed, 0xDA7A));

    // class means: scaled one-hot directions in latent space
    const double separation = 2.0;
    std::vector<Vector> mu(spec.classes, Vector(spec.latent_dim));
    for (std::size_t c = 0; c < spec.classes; ++c) mu[c][c] = separation;

    // per-modality mixing maps
    std::vector<Matrix> a_maps;
    std::vector<Vector> b_offsets;
    for (std::size_t m = 0; m < m_count; ++m) {
        Matrix a(spec.modal_dims[m], spec.latent_dim);
        for (double& x : a.data()) x = rng.normal() / std::sqrt(double(spec.latent_dim));
        a_maps.push_back(std::move(a));
        Vector b(spec.modal_dims[m]);
        for (std::size_t j = 0; j < spec.modal_dims[m]; ++j) b[j] = 0.1 * rng.normal();
        b_offsets.push_back(std::move(b));
    }

    // round-robin labels keep classes balanced within +-1
    std::vector<int> labels(spec.n_samples);
    for (std::size_t i = 0; i < spec.n_samples; ++i)
        labels[i] = static_cast<int>(i % spec.classes);

    std::vector<Matrix> inputs;
    for (std::size_t m = 0; m < m_count; ++m)
        inputs.emplace_back(spec.n_samples, spec.modal_dims[m]);

    for (std::size_t i = 0; i < spec.n_samples; ++i) {
        const int y = labels[i];
        Vector h(spec.latent_dim);
        for (std::size_t k = 0; k < spec.latent_dim; ++k) h[k] = mu[y][k] + rng.normal();

        const int y_flip = static_cast<int>((y + 1) % spec.classes);
        Vector h_flip = h;
        for (std::size_t k = 0; k < spec.latent_dim; ++k)
            h_flip[k] += mu[y_flip][k] - mu[y][k];

        for (std::size_t m = 0; m < m_count; ++m) {
            Vector latent = h;
            if (spec.destructive_modality && *spec.destructive_modality == m) {
                const double s = spec.destructive_strength;
                for (std::size_t k = 0; k < spec.latent_dim; ++k)
                    latent[k] = (1.0 - s) * h[k] + s * h_flip[k];
            }
            for (std::size_t j = 0; j < spec.modal_dims[m]; ++j) {
                double v = b_offsets[m][j];
                if (spec.snr[m] > 0.0) {
                    double signal = 0.0;
                    for (std::size_t k = 0; k < spec.latent_dim; ++k)
                        signal += a_maps[m](j, k) * latent[k];
                    v += signal + rng.normal() / spec.snr[m];
                } else {
                    v += rng.normal();  // pure noise channel
                }
                inputs[m](i, j) = v;
            }
        }
    }

    // stratified 70/15/15 split
    std::vector<std::vector<std::size_t>> by_class(spec.classes);
    for (std::size_t i = 0; i < spec.n_samples; ++i) by_class[labels[i]].push_back(i);
    Rng split_rng(derive_seed(spec.seed, 0x5917));
    std::vector<std::size_t> train_idx, val_idx, test_idx;
    for (auto& bucket : by_class) {
        for (std::size_t i = bucket.size(); i > 1; --i)
            std::swap(bucket[i - 1], bucket[split_rng.uniform_int(i)]);
        const std::size_t n_train = (bucket.size() * 70) / 100;
        const std::size_t n_val = (bucket.size() * 15) / 100;
        for (std::size_t i = 0; i < bucket.size(); ++i) {
            if (i < n_train)
                train_idx.push_back(bucket[i]);
            else if (i < n_train + n_val)
                val_idx.push_back(bucket[i]);
            else
                test_idx.push_back(bucket[i]);
        }
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(test_idx.begin(), test_idx.end());

    auto take = [&](const std::vector<std::size_t>& idx) {
        ModalityBatch b;
        for (std::size_t m = 0; m < m_count; ++m) {
            Matrix x(idx.size(), spec.modal_dims[m]);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < spec.modal_dims[m]; ++j)
                    x(r, j) = inputs[m](idx[r], j);
            b.inputs.push_back(std::move(x));
        }
        for (std::size_t r = 0; r < idx.size(); ++r) b.labels.push_back(labels[idx[r]]);
        b.availability = SlotMask(idx.size(), m_count, true);
        return b;
    };

    Dataset ds;
    ds.spec = spec;
    ds.train = take(train_idx);
    ds.val = take(val_idx);
    ds.test = take(test_idx);
    return ds;
}

// ----- missing patterns ----------------------------------------------------------

struct MissingPattern {
    enum class Kind { FixedSet, GlobalRate } kind = Kind::FixedSet;
    std::vector<std::size_t> available;  // FixedSet: the modalities kept
    double rate = 0.0;                   // GlobalRate: per-cell drop probability
    std::uint64_t seed = 0;

    static MissingPattern fixed_set(std::vector<std::size_t> mods) {
        MissingPattern p;
        p.kind = Kind::FixedSet;
        p.available = std::move(mods);
        return p;
    }
    static MissingPattern global_rate(double eta, std::uint64_t seed) {
        MissingPattern p;
        p.kind = Kind::GlobalRate;
        p.rate = eta;
        p.seed = seed;
        return p;
    }

    std::string describe() const {
        if (kind == Kind::FixedSet) {
            std::string s = "fixed{";
            for (std::size_t i = 0; i < available.size(); ++i)
                s += (i ? "," : "") + std::to_string(available[i]);
            return s + "}";
        }
        std::ostringstream ss;
        ss << "rate" << rate;
        return ss.str();
    }
};

struct MissingStats {
    std::size_t dropped = 0;
    std::size_t guard_rescues = 0;  // drops skipped to keep the last modality
};

// Availability update. A sample never loses its last available modality.
inline ModalityBatch apply_missing(const ModalityBatch& batch, const MissingPattern& pattern,
                                   MissingStats* stats = nullptr) {
    const std::size_t n = batch.size();
    const std::size_t m_count = batch.availability.m;
    ModalityBatch out = batch;

    if (pattern.kind == MissingPattern::Kind::FixedSet) {
        if (pattern.available.empty())
            throw StructuralError("apply_missing: empty fixed set");
        for (std::size_t m : pattern.available)
            if (m >= m_count) throw StructuralError("apply_missing: modality out of range");
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t m = 0; m < m_count; ++m) {
                const bool keep = std::find(pattern.available.begin(), pattern.available.end(),
                                            m) != pattern.available.end();
                if (!keep && out.availability.at(i, m)) {
                    out.availability.set(i, m, false);
                    if (stats) stats->dropped++;
                }
            }
    } else {
        if (pattern.rate < 0.0 || pattern.rate > 1.0)
            throw StructuralError("apply_missing: rate outside [0,1]");
        Rng rng(derive_seed(pattern.seed, 0x9155));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t m = 0; m < m_count; ++m) {
                if (!out.availability.at(i, m)) continue;
                if (rng.uniform() < pattern.rate) {
                    std::size_t live = 0;
                    for (std::size_t mm = 0; mm < m_count; ++mm)
                        live += out.availability.at(i, mm) ? 1 : 0;
                    if (live <= 1) {
                        if (stats) stats->guard_rescues++;
                        continue;
                    }
                    out.availability.set(i, m, false);
                    if (stats) stats->dropped++;
                }
            }
        }
    }
    // guard invariant
    for (std::size_t i = 0; i < n; ++i) {
        bool any = false;
        for (std::size_t m = 0; m < m_count; ++m) any |= out.availability.at(i, m);
        if (!any) throw NumericalError("apply_missing: guard failed");
    }
    return out;
}

// ----- corruption ----------------------------------------------------------------

struct CorruptionSpec {
    enum class Kind { GaussianNoise, ZeroBurst, FeatureShuffle } kind = Kind::GaussianNoise;
    enum class Severity { Clean, Light, Heavy } severity = Severity::Heavy;
    std::optional<std::size_t> target_modality;  // all modalities when unset
    std::uint64_t seed = 0;

    std::string describe() const {
        std::string k = kind == Kind::GaussianNoise ? "gaussian"
                        : kind == Kind::ZeroBurst   ? "zero_burst"
                                                    : "feature_shuffle";
        std::string s = severity == Severity::Clean   ? "clean"
                        : severity == Severity::Light ? "light"
                                                      : "heavy";
        std::string t = target_modality ? "m" + std::to_string(*target_modality) : "all";
        return k + "/" + s + "/" + t;
    }
};

// Severity presets: light = (sigma 0.5 * feature std, fraction 0.1),
// heavy = (sigma 1.5 * feature std, fraction 0.3). Deterministic per seed.
inline ModalityBatch corrupt(const ModalityBatch& batch, const CorruptionSpec& spec) {
    ModalityBatch out = batch;
    if (spec.severity == CorruptionSpec::Severity::Clean) return out;
    const double sigma_scale = spec.severity == CorruptionSpec::Severity::Light ? 0.5 : 1.5;
    const double fraction = spec.severity == CorruptionSpec::Severity::Light ? 0.1 : 0.3;

    Rng rng(derive_seed(spec.seed, 0xC0));
    for (std::size_t m = 0; m < out.inputs.size(); ++m) {
        if (spec.target_modality && *spec.target_modality != m) continue;
        Matrix& x = out.inputs[m];
        const std::size_t n = x.rows(), d = x.cols();
        if (n == 0) continue;

        switch (spec.kind) {
            case CorruptionSpec::Kind::GaussianNoise: {
                // scalar feature std over the whole modality block
                double mean = 0.0;
                for (double v : x.data()) mean += v;
                mean /= static_cast<double>(n * d);
                double var = 0.0;
                for (double v : x.data()) var += (v - mean) * (v - mean);
                var /= static_cast<double>(n * d);
                const double sigma = sigma_scale * std::sqrt(var);
                for (double& v : x.data()) v += rng.normal(0.0, sigma);
                break;
            }
            case CorruptionSpec::Kind::ZeroBurst: {
                const double f =
                    spec.severity == CorruptionSpec::Severity::Heavy && fraction >= 1.0
                        ? 1.0
                        : fraction;
                for (double& v : x.data())
                    if (rng.uniform() < f) v = 0.0;
                break;
            }
            case CorruptionSpec::Kind::FeatureShuffle: {
                // permute the selected columns across samples
                for (std::size_t j = 0; j < d; ++j) {
                    if (rng.uniform() >= fraction) continue;
                    std::vector<std::size_t> perm(n);
                    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
                    for (std::size_t i = n; i > 1; --i)
                        std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
                    std::vector<double> col(n);
                    for (std::size_t i = 0; i < n; ++i) col[i] = x(perm[i], j);
                    for (std::size_t i = 0; i < n; ++i) x(i, j) = col[i];
                }
                break;
            }
        }
    }
    return out;
}

// Zero all features of one modality; the fraction-1.0 burst used in tests.
inline ModalityBatch zero_burst_all(const ModalityBatch& batch, std::size_t modality) {
    ModalityBatch out = batch;
    for (double& v : out.inputs[modality].data()) v = 0.0;
    return out;
}

// ----- dataset files -------------------------------------------------------------

namespace detail {

inline std::string csv_num(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

inline void write_split(const std::filesystem::path& dir, const ModalityBatch& batch) {
    std::filesystem::create_directories(dir);
    const std::size_t n = batch.size();
    for (std::size_t m = 0; m < batch.inputs.size(); ++m) {
        std::ofstream f(dir / ("modality_" + std::to_string(m) + ".csv"));
        const Matrix& x = batch.inputs[m];
        for (std::size_t j = 0; j < x.cols(); ++j) f << (j ? "," : "") << "f" << j;
        f << "\n";
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < x.cols(); ++j)
                f << (j ? "," : "") << csv_num(x(i, j));
            f << "\n";
        }
    }
    {
        std::ofstream f(dir / "labels.csv");
        f << "label\n";
        for (int y : batch.labels) f << y << "\n";
    }
    {
        std::ofstream f(dir / "availability.csv");
        for (std::size_t m = 0; m < batch.availability.m; ++m) f << (m ? "," : "") << "m" << m;
        f << "\n";
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t m = 0; m < batch.availability.m; ++m)
                f << (m ? "," : "") << (batch.availability.at(i, m) ? 1 : 0);
            f << "\n";
        }
    }
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw StructuralError("read_csv: cannot open " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

inline ModalityBatch read_split(const std::filesystem::path& dir, std::size_t m_count) {
    ModalityBatch b;
    for (std::size_t m = 0; m < m_count; ++m) {
        const auto rows = read_csv(dir / ("modality_" + std::to_string(m) + ".csv"));
        const std::size_t n = rows.size() - 1;
        const std::size_t d = rows[0].size();
        Matrix x(n, d);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) x(i, j) = std::stod(rows[i + 1][j]);
        b.inputs.push_back(std::move(x));
    }
    const auto label_rows = read_csv(dir / "labels.csv");
    for (std::size_t i = 1; i < label_rows.size(); ++i)
        b.labels.push_back(std::stoi(label_rows[i][0]));
    const auto avail_rows = read_csv(dir / "availability.csv");
    b.availability = SlotMask(b.labels.size(), m_count, true);
    for (std::size_t i = 1; i < avail_rows.size(); ++i)
        for (std::size_t m = 0; m < m_count; ++m)
            b.availability.set(i - 1, m, avail_rows[i][m] == "1");
    return b;
}

}  // namespace detail

// Files: manifest.json plus per-split modality_<id>.csv, labels.csv,
// availability.csv with 0/1 cells. Column order is documented in the
// manifest.
inline void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    detail::write_split(fs::path(dir) / "train", ds.train);
    detail::write_split(fs::path(dir) / "val", ds.val);
    detail::write_split(fs::path(dir) / "test", ds.test);

    nlohmann::json manifest;
    manifest["format"] = "modalimmune-dataset-v1";
    manifest["seed"] = ds.spec.seed;
    manifest["classes"] = ds.spec.classes;
    manifest["modal_dims"] = ds.spec.modal_dims;
    manifest["snr"] = ds.spec.snr;
    manifest["latent_dim"] = ds.spec.latent_dim;
    manifest["n_samples"] = ds.spec.n_samples;
    manifest["destructive_modality"] =
        ds.spec.destructive_modality ? nlohmann::json(*ds.spec.destructive_modality)
                                     : nlohmann::json(nullptr);
    manifest["destructive_strength"] = ds.spec.destructive_strength;
    manifest["splits"] = {{"train", ds.train.size()},
                          {"val", ds.val.size()},
                          {"test", ds.test.size()}};
    manifest["files"] = {"modality_<id>.csv: header f0..f{D-1}, one row per sample",
                         "labels.csv: header label, class index per sample",
                         "availability.csv: header m0..m{M-1}, 0/1 cells"};
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(1) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw StructuralError("load_dataset: no manifest in " + dir);
    nlohmann::json manifest;
    mf >> manifest;
    Dataset ds;
    ds.spec.seed = manifest.at("seed").get<std::uint64_t>();
    ds.spec.classes = manifest.at("classes").get<std::size_t>();
    ds.spec.modal_dims = manifest.at("modal_dims").get<std::vector<std::size_t>>();
    ds.spec.snr = manifest.at("snr").get<std::vector<double>>();
    ds.spec.latent_dim = manifest.at("latent_dim").get<std::size_t>();
    ds.spec.n_samples = manifest.at("n_samples").get<std::size_t>();
    if (!manifest.at("destructive_modality").is_null())
        ds.spec.destructive_modality = manifest.at("destructive_modality").get<std::size_t>();
    ds.spec.destructive_strength = manifest.at("destructive_strength").get<double>();
    const std::size_t m_count = ds.spec.modal_dims.size();
    ds.train = detail::read_split(fs::path(dir) / "train", m_count);
    ds.val = detail::read_split(fs::path(dir) / "val", m_count);
    ds.test = detail::read_split(fs::path(dir) / "test", m_count);
    return ds;
}

}  // namespace modalimmune
