#include "mapex/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "mapex/errors.hpp"

namespace mapex {

namespace {

constexpr const char* kMagic = "MAPEXCKPT 1";

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += f(v[i]);
    }
    return out;
}

std::string join_ints(const std::vector<int>& v) {
    return join<int>(v, [](const int& x) { return std::to_string(x); });
}

std::string join_doubles(const std::vector<double>& v) {
    return join<double>(v, [](const double& x) { return fmt_double(x); });
}

std::vector<int> parse_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

std::vector<double> parse_doubles(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stod(tok));
    return out;
}

std::string build_manifest(const MapexModel& model, long step) {
    const auto& cfg = model.cfg;
    std::string m;
    m += "format_version = 1\n";
    m += "step = " + std::to_string(step) + "\n";
    m += "rng_digest = seed-derived\n";
    m += "dim = " + std::to_string(cfg.dim) + "\n";
    m += "depth = " + std::to_string(cfg.depth) + "\n";
    m += "heads = " + std::to_string(cfg.heads) + "\n";
    m += "experts = " + std::to_string(cfg.experts) + "\n";
    m += "expert_hidden = " + std::to_string(cfg.expert_hidden) + "\n";
    m += "top_k = " + std::to_string(cfg.top_k) + "\n";
    m += "routing = " + to_string(cfg.routing) + "\n";
    m += std::string("shared_expert = ") + (cfg.shared_expert ? "1" : "0") + "\n";
    m += "dec_depth = " + std::to_string(cfg.dec_depth) + "\n";
    m += "dec_dim = " + std::to_string(cfg.dec_dim) + "\n";
    m += "patch = " + std::to_string(cfg.patch) + "\n";
    m += "mask_ratio = " + fmt_double(cfg.mask_ratio) + "\n";
    m += "image_size = " + std::to_string(cfg.image_size) + "\n";
    m += "modality_count = " + std::to_string(cfg.modalities.size()) + "\n";
    for (std::size_t i = 0; i < cfg.modalities.size(); ++i) {
        const auto& spec = cfg.modalities[i];
        std::string pre = "modality." + std::to_string(i) + ".";
        m += pre + "id = " + std::to_string(spec.id) + "\n";
        m += pre + "name = " + spec.name + "\n";
        m += pre + "channels = " + std::to_string(spec.channels) + "\n";
        m += pre + "informativeness = " + fmt_double(spec.informativeness) + "\n";
    }
    m += std::string("pruned = ") + (model.prune_info ? "1" : "0") + "\n";
    if (model.prune_info) {
        const auto& info = *model.prune_info;
        m += "prune.k = " + std::to_string(info.spec.k) + "\n";
        m += "prune.modalities = " + join_ints(info.spec.modalities) + "\n";
        for (std::size_t l = 0; l < info.retained.size(); ++l) {
            std::string pre = "prune.layer" + std::to_string(l) + ".";
            m += pre + "retained = " + join_ints(info.retained[l]) + "\n";
            for (const auto& [mid, fz] : info.frozen[l]) {
                std::string fpre = pre + "frozen." + std::to_string(mid) + ".";
                m += fpre + "selected = " + join_ints(fz.selected) + "\n";
                m += fpre + "gates = " + join_doubles(fz.gates) + "\n";
                m += fpre + "probs = " + join_doubles(fz.probs) + "\n";
            }
        }
    }
    return m;
}

}  // namespace

void save_checkpoint(const MapexModel& model, const std::string& path, long step) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path + " for writing");
    std::string manifest = build_manifest(model, step);
    auto params = named_parameters(model);
    f << kMagic << "\n";
    f << "manifest_bytes " << manifest.size() << "\n";
    f.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    f << "TENSORS " << params.size() << "\n";
    for (const auto& [name, t] : params) {
        f << name << " " << t.shape().size();
        for (int d : t.shape()) f << " " << d;
        f << "\n";
        f.write(reinterpret_cast<const char*>(t.value().data()),
                static_cast<std::streamsize>(t.value().size() * sizeof(double)));
    }
    f << "END\n";
    if (!f) throw CheckpointError("write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != kMagic)
        throw CheckpointError("bad magic in " + path);
    if (!std::getline(f, line) || line.rfind("manifest_bytes ", 0) != 0)
        throw CheckpointError("missing manifest length");
    std::size_t mbytes = std::stoul(line.substr(15));
    std::string manifest(mbytes, '\0');
    f.read(manifest.data(), static_cast<std::streamsize>(mbytes));
    if (!f) throw CheckpointError("truncated manifest");

    std::map<std::string, std::string> kv;
    {
        std::stringstream ss(manifest);
        std::string ml;
        while (std::getline(ss, ml)) {
            auto eq = ml.find(" = ");
            if (eq == std::string::npos) continue;
            kv[ml.substr(0, eq)] = ml.substr(eq + 3);
        }
    }
    auto get = [&](const std::string& k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw CheckpointError("manifest missing key " + k);
        return it->second;
    };
    if (get("format_version") != "1")
        throw CheckpointError("unsupported checkpoint version " + get("format_version"));

    ModelConfig cfg;
    cfg.dim = std::stoi(get("dim"));
    cfg.depth = std::stoi(get("depth"));
    cfg.heads = std::stoi(get("heads"));
    cfg.experts = std::stoi(get("experts"));
    cfg.expert_hidden = std::stoi(get("expert_hidden"));
    cfg.top_k = std::stoi(get("top_k"));
    cfg.routing = routing_mode_from_string(get("routing"));
    cfg.shared_expert = get("shared_expert") == "1";
    cfg.dec_depth = std::stoi(get("dec_depth"));
    cfg.dec_dim = std::stoi(get("dec_dim"));
    cfg.patch = std::stoi(get("patch"));
    cfg.mask_ratio = std::stod(get("mask_ratio"));
    cfg.image_size = std::stoi(get("image_size"));
    int mc = std::stoi(get("modality_count"));
    for (int i = 0; i < mc; ++i) {
        std::string pre = "modality." + std::to_string(i) + ".";
        ModalitySpec spec;
        spec.id = std::stoi(get(pre + "id"));
        spec.name = get(pre + "name");
        spec.channels = std::stoi(get(pre + "channels"));
        spec.informativeness = std::stod(get(pre + "informativeness"));
        cfg.modalities.push_back(spec);
    }

    LoadedCheckpoint out;
    out.step = std::stol(get("step"));
    out.model = init_model(cfg, 0);
    if (get("pruned") == "1") {
        PruneInfo info;
        info.spec.k = std::stoi(get("prune.k"));
        info.spec.modalities = parse_ints(get("prune.modalities"));
        for (int l = 0; l < cfg.depth; ++l) {
            std::string pre = "prune.layer" + std::to_string(l) + ".";
            info.retained.push_back(parse_ints(get(pre + "retained")));
            std::map<int, FrozenDecision> fz;
            for (int mid : info.spec.modalities) {
                std::string fpre = pre + "frozen." + std::to_string(mid) + ".";
                FrozenDecision d;
                d.selected = parse_ints(get(fpre + "selected"));
                d.gates = parse_doubles(get(fpre + "gates"));
                d.probs = parse_doubles(get(fpre + "probs"));
                fz[mid] = std::move(d);
            }
            info.frozen.push_back(std::move(fz));
            out.model.blocks[l].moe.experts.resize(info.retained.back().size());
        }
        out.model.prune_info = std::move(info);
    }

    // read named tensors, then match them against the rebuilt structure
    if (!std::getline(f, line) || line.rfind("TENSORS ", 0) != 0)
        throw CheckpointError("missing tensor section header");
    std::size_t count = std::stoul(line.substr(8));
    std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> tensors;
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(f, line)) throw CheckpointError("truncated tensor header");
        std::stringstream hs(line);
        std::string name;
        int ndim = 0;
        hs >> name >> ndim;
        if (!hs || ndim < 0) throw CheckpointError("malformed tensor header: " + line);
        std::vector<int> shape(ndim);
        std::size_t n = 1;
        for (int d = 0; d < ndim; ++d) {
            hs >> shape[d];
            if (!hs || shape[d] <= 0) throw CheckpointError("malformed tensor shape: " + line);
            n *= shape[d];
        }
        std::vector<double> data(n);
        f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!f) throw CheckpointError("truncated tensor data for " + name);
        tensors[name] = {std::move(shape), std::move(data)};
    }
    char trailer[4] = {};
    f.read(trailer, 4);
    if (f.gcount() != 4 || std::string(trailer, 4) != "END\n")
        throw CheckpointError("missing END trailer");

    auto params = named_parameters(out.model);
    if (params.size() != tensors.size())
        throw CheckpointError("tensor count mismatch: file has " + std::to_string(tensors.size()) +
                              ", model expects " + std::to_string(params.size()));
    for (auto& [name, t] : params) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw CheckpointError("missing tensor " + name);
        if (it->second.first != t.shape()) throw CheckpointError("shape mismatch for " + name);
        t.value() = it->second.second;
    }
    return out;
}

}  // namespace mapex
