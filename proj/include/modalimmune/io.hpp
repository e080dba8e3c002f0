#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "model.hpp"

namespace modalimmune {

// Checkpoints are a self-describing JSON container: model dimensions plus a
// flat list of named float64 arrays with shapes, in layout order.
inline nlohmann::json checkpoint_to_json(const ModelParams& params) {
    nlohmann::json j;
    j["format"] = "modalimmune-checkpoint-v1";
    j["dims"] = {{"modalities", params.dims.modalities},
                 {"raw_dims", params.dims.raw_dims},
                 {"hidden", params.dims.hidden},
                 {"embed", params.dims.embed},
                 {"property_dim", params.dims.property_dim},
                 {"fusion_out", params.dims.fusion_out},
                 {"classes", params.dims.classes}};
    const ParamLayout layout = param_layout(params.dims);
    const Vector flat = flatten_params(params);
    nlohmann::json arrays = nlohmann::json::array();
    for (const auto& blk : layout.blocks) {
        nlohmann::json a;
        a["name"] = blk.name;
        a["shape"] = blk.shape;
        std::vector<double> data(blk.size);
        for (std::size_t i = 0; i < blk.size; ++i) data[i] = flat[blk.offset + i];
        a["data"] = data;
        arrays.push_back(std::move(a));
    }
    j["arrays"] = std::move(arrays);
    return j;
}

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw StructuralError("save_checkpoint: cannot open " + path);
    out << checkpoint_to_json(params).dump(1) << "\n";
}

inline ModelParams checkpoint_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "modalimmune-checkpoint-v1")
        throw StructuralError("checkpoint: unknown format");
    ModelDims dims;
    const auto& d = j.at("dims");
    dims.modalities = d.at("modalities").get<std::size_t>();
    dims.raw_dims = d.at("raw_dims").get<std::vector<std::size_t>>();
    dims.hidden = d.at("hidden").get<std::size_t>();
    dims.embed = d.at("embed").get<std::size_t>();
    dims.property_dim = d.at("property_dim").get<std::size_t>();
    dims.fusion_out = d.at("fusion_out").get<std::size_t>();
    dims.classes = d.at("classes").get<std::size_t>();

    const ParamLayout layout = param_layout(dims);
    Vector flat(layout.total);
    for (const auto& a : j.at("arrays")) {
        const auto& blk = layout.find(a.at("name").get<std::string>());
        const auto data = a.at("data").get<std::vector<double>>();
        if (data.size() != blk.size)
            throw StructuralError("checkpoint: size mismatch in " + blk.name);
        for (std::size_t i = 0; i < blk.size; ++i) flat[blk.offset + i] = data[i];
    }
    return unflatten_params(dims, flat);
}

inline ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw StructuralError("load_checkpoint: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return checkpoint_from_json(j);
}

// Minimal CSV writer; numeric formatting uses max_digits10 round-trip
// precision so identical values serialize identically.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header)
        : out_(path) {
        if (!out_) throw StructuralError("CsvWriter: cannot open " + path);
        for (std::size_t i = 0; i < header.size(); ++i)
            out_ << (i ? "," : "") << header[i];
        out_ << "\n";
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << "\n";
    }

    static std::string num(double v) {
        std::ostringstream ss;
        ss.precision(17);
        ss << v;
        return ss.str();
    }

private:
    std::ofstream out_;
};

}  // namespace modalimmune
