#include "mapex/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "mapex/errors.hpp"
#include "mapex/rng.hpp"

namespace mapex {

namespace {

// per-(class, modality, channel) grating parameters; the noise-free image is
// a pure function of the class so σ=0 regenerates identical samples
struct Grating {
    double freq, theta, phase;
};

// each modality occupies its own frequency band; the class shifts the
// frequency slightly within the band, so telling classes apart requires
// processing tuned to that band
Grating grating_params(int cls, int modality, int channel, int classes) {
    constexpr double kBand[4] = {2.0, 4.0, 8.0, 14.0};
    Grating g;
    double base = kBand[modality % 4];
    g.freq = base * (1.0 + 0.03 * cls / classes);
    g.theta = 0.3 + 0.4 * modality;
    g.phase = channel * (M_PI / 3.0) + 0.7 * modality;
    return g;
}

MultiModalSample make_sample(const DataConfig& cfg, int sample_id, int label) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(sample_id)));
    const int H = cfg.image_size, W = cfg.image_size;
    MultiModalSample s;
    s.id = sample_id;
    s.label = label;
    s.planes.resize(cfg.modalities.size());
    for (std::size_t m = 0; m < cfg.modalities.size(); ++m) {
        const auto& spec = cfg.modalities[m];
        auto& plane = s.planes[m];
        plane.resize(static_cast<std::size_t>(spec.channels) * H * W);
        for (int ch = 0; ch < spec.channels; ++ch) {
            Grating g = grating_params(label, spec.id, ch, cfg.classes);
            double ct = std::cos(g.theta), st = std::sin(g.theta);
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    double u = (x * ct + y * st) / H;
                    double v = spec.informativeness * std::sin(2.0 * M_PI * g.freq * u + g.phase);
                    plane[(ch * H + y) * W + x] = v + cfg.noise * rng.normal();
                }
            }
        }
    }
    return s;
}

}  // namespace

DataConfig default_data_config() {
    DataConfig cfg;
    cfg.modalities = {
        {0, "RGBish", 3, 1.0},
        {1, "REDEDGEish", 2, 0.8},
        {2, "SARish", 1, 0.6},
        {3, "ELEish", 1, 0.4},
    };
    return cfg;
}

int Dataset::total_channels() const {
    int c = 0;
    for (const auto& m : cfg.modalities) c += m.channels;
    return c;
}

Dataset generate(const DataConfig& cfg) {
    if (cfg.modalities.size() < 2) throw ConfigError("need at least 2 modalities");
    if (cfg.classes < 2) throw ConfigError("need at least 2 classes");
    if (cfg.image_size <= 0) throw ConfigError("invalid image size");
    for (std::size_t i = 0; i < cfg.modalities.size(); ++i) {
        if (cfg.modalities[i].id != static_cast<int>(i))
            throw ConfigError("modality ids must be contiguous from 0");
        if (cfg.modalities[i].channels < 1) throw ConfigError("modality channel count must be >= 1");
    }
    Dataset ds;
    ds.cfg = cfg;
    int next_id = 0;
    auto fill = [&](std::vector<MultiModalSample>& split, int n) {
        split.reserve(n);
        for (int i = 0; i < n; ++i) {
            split.push_back(make_sample(cfg, next_id, i % cfg.classes));
            ++next_id;
        }
    };
    fill(ds.train, cfg.n_train);
    fill(ds.val, cfg.n_val);
    fill(ds.test, cfg.n_test);
    return ds;
}

DatasetStats compute_stats(const Dataset& ds) {
    if (ds.train.empty()) throw DataError("empty training split");
    const int H = ds.cfg.image_size, W = ds.cfg.image_size;
    const int plane_px = H * W;
    DatasetStats st;
    st.mean.assign(ds.total_channels(), 0.0);
    st.stddev.assign(ds.total_channels(), 0.0);
    long n = static_cast<long>(ds.train.size()) * plane_px;
    for (const auto& s : ds.train) {
        int gc = 0;
        for (std::size_t m = 0; m < s.planes.size(); ++m) {
            int C = ds.cfg.modalities[m].channels;
            for (int ch = 0; ch < C; ++ch, ++gc)
                for (int p = 0; p < plane_px; ++p) st.mean[gc] += s.planes[m][ch * plane_px + p];
        }
    }
    for (auto& v : st.mean) v /= n;
    for (const auto& s : ds.train) {
        int gc = 0;
        for (std::size_t m = 0; m < s.planes.size(); ++m) {
            int C = ds.cfg.modalities[m].channels;
            for (int ch = 0; ch < C; ++ch, ++gc)
                for (int p = 0; p < plane_px; ++p) {
                    double d = s.planes[m][ch * plane_px + p] - st.mean[gc];
                    st.stddev[gc] += d * d;
                }
        }
    }
    for (std::size_t c = 0; c < st.stddev.size(); ++c) {
        st.stddev[c] = std::sqrt(st.stddev[c] / n);
        if (st.stddev[c] <= 0.0)
            throw DataError("degenerate channel " + std::to_string(c) + " has zero std");
    }
    return st;
}

void normalize(Dataset& ds, const DatasetStats& stats) {
    const int plane_px = ds.cfg.image_size * ds.cfg.image_size;
    auto apply = [&](std::vector<MultiModalSample>& split) {
        for (auto& s : split) {
            int gc = 0;
            for (std::size_t m = 0; m < s.planes.size(); ++m) {
                int C = ds.cfg.modalities[m].channels;
                for (int ch = 0; ch < C; ++ch, ++gc)
                    for (int p = 0; p < plane_px; ++p) {
                        double& v = s.planes[m][ch * plane_px + p];
                        v = (v - stats.mean[gc]) / stats.stddev[gc];
                    }
            }
        }
    };
    apply(ds.train);
    apply(ds.val);
    apply(ds.test);
}

Dataset few_shot_subset(const Dataset& ds, int k_shot, std::uint64_t seed) {
    Dataset out;
    out.cfg = ds.cfg;
    out.val = ds.val;
    out.test = ds.test;
    for (int c = 0; c < ds.cfg.classes; ++c) {
        std::vector<int> members;
        for (std::size_t i = 0; i < ds.train.size(); ++i)
            if (ds.train[i].label == c) members.push_back(static_cast<int>(i));
        if (static_cast<int>(members.size()) < k_shot)
            throw DataError("class " + std::to_string(c) + " has fewer than k_shot samples");
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(c)));
        rng.shuffle(members);
        for (int i = 0; i < k_shot; ++i) out.train.push_back(ds.train[members[i]]);
    }
    return out;
}

// ---- export / import -------------------------------------------------------

namespace {

void write_split_f32(const std::string& path, const std::vector<MultiModalSample>& split) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    for (const auto& s : split)
        for (const auto& plane : s.planes)
            for (double v : plane) {
                float x = static_cast<float>(v);
                f.write(reinterpret_cast<const char*>(&x), sizeof(float));
            }
    if (!f) throw DataError("write failed for " + path);
}

void read_split_f32(const std::string& path, std::vector<MultiModalSample>& split,
                    const DataConfig& cfg) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    const int plane_px = cfg.image_size * cfg.image_size;
    for (auto& s : split) {
        s.planes.resize(cfg.modalities.size());
        for (std::size_t m = 0; m < cfg.modalities.size(); ++m) {
            s.planes[m].resize(static_cast<std::size_t>(cfg.modalities[m].channels) * plane_px);
            for (double& v : s.planes[m]) {
                float x;
                f.read(reinterpret_cast<char*>(&x), sizeof(float));
                if (!f) throw DataError("truncated split file " + path);
                v = x;
            }
        }
    }
}

std::string join_ints(const std::vector<MultiModalSample>& split,
                      int MultiModalSample::* field) {
    std::string out;
    for (std::size_t i = 0; i < split.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(split[i].*field);
    }
    return out;
}

}  // namespace

void export_dataset(const Dataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream mf(dir + "/manifest.txt");
    if (!mf) throw DataError("cannot open manifest in " + dir);
    mf << "format = mapex-dataset-1\n";
    mf << "image_size = " << ds.cfg.image_size << "\n";
    mf << "classes = " << ds.cfg.classes << "\n";
    mf << "noise = " << ds.cfg.noise << "\n";
    mf << "seed = " << ds.cfg.seed << "\n";
    mf << "modality_count = " << ds.cfg.modalities.size() << "\n";
    for (const auto& m : ds.cfg.modalities) {
        mf << "modality." << m.id << ".name = " << m.name << "\n";
        mf << "modality." << m.id << ".channels = " << m.channels << "\n";
        mf << "modality." << m.id << ".informativeness = " << m.informativeness << "\n";
    }
    auto split_meta = [&](const char* name, const std::vector<MultiModalSample>& split) {
        mf << name << ".count = " << split.size() << "\n";
        mf << name << ".ids = " << join_ints(split, &MultiModalSample::id) << "\n";
        mf << name << ".labels = " << join_ints(split, &MultiModalSample::label) << "\n";
    };
    split_meta("train", ds.train);
    split_meta("val", ds.val);
    split_meta("test", ds.test);
    write_split_f32(dir + "/train.f32", ds.train);
    write_split_f32(dir + "/val.f32", ds.val);
    write_split_f32(dir + "/test.f32", ds.test);
}

Dataset import_dataset(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.txt");
    if (!mf) throw DataError("cannot open manifest in " + dir);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(mf, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        auto trim = [](std::string& s) {
            while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
            while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.pop_back();
        };
        trim(key);
        trim(val);
        kv[key] = val;
    }
    auto get = [&](const std::string& k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw DataError("manifest missing key " + k);
        return it->second;
    };
    if (get("format") != "mapex-dataset-1") throw DataError("unsupported dataset format");
    Dataset ds;
    ds.cfg.image_size = std::stoi(get("image_size"));
    ds.cfg.classes = std::stoi(get("classes"));
    ds.cfg.noise = std::stod(get("noise"));
    ds.cfg.seed = std::stoull(get("seed"));
    int mc = std::stoi(get("modality_count"));
    for (int m = 0; m < mc; ++m) {
        std::string pre = "modality." + std::to_string(m) + ".";
        ModalitySpec spec;
        spec.id = m;
        spec.name = get(pre + "name");
        spec.channels = std::stoi(get(pre + "channels"));
        spec.informativeness = std::stod(get(pre + "informativeness"));
        ds.cfg.modalities.push_back(spec);
    }
    auto parse_ints = [](const std::string& s) {
        std::vector<int> out;
        std::stringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) out.push_back(std::stoi(tok));
        return out;
    };
    auto load_split = [&](const char* name, std::vector<MultiModalSample>& split) {
        int n = std::stoi(get(std::string(name) + ".count"));
        auto ids = parse_ints(get(std::string(name) + ".ids"));
        auto labels = parse_ints(get(std::string(name) + ".labels"));
        if (static_cast<int>(ids.size()) != n || static_cast<int>(labels.size()) != n)
            throw DataError("manifest split metadata inconsistent for " + std::string(name));
        split.resize(n);
        for (int i = 0; i < n; ++i) {
            split[i].id = ids[i];
            split[i].label = labels[i];
        }
        read_split_f32(dir + "/" + name + ".f32", split, ds.cfg);
    };
    load_split("train", ds.train);
    load_split("val", ds.val);
    load_split("test", ds.test);
    ds.cfg.n_train = static_cast<int>(ds.train.size());
    ds.cfg.n_val = static_cast<int>(ds.val.size());
    ds.cfg.n_test = static_cast<int>(ds.test.size());
    return ds;
}

}  // namespace mapex
