#include "mapex/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mapex/errors.hpp"

namespace mapex {

namespace {

std::string canon_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(tok);
    return out;
}

}  // namespace

RunConfig::RunConfig() {
    auto def = [&](const std::string& k, char type, const std::string& v) {
        types_[k] = type;
        values_[k] = v;
    };
    def("seed", 'i', "0");
    def("out", 's', "out");
    // data
    def("dataset", 's', "");
    def("image_size", 'i', "32");
    def("classes", 'i', "4");
    def("n_train", 'i', "512");
    def("n_val", 'i', "128");
    def("n_test", 'i', "128");
    def("noise", 'f', canon_double(0.3));
    def("modality_names", 's', "RGBish,REDEDGEish,SARish,ELEish");
    def("modality_channels", 's', "3,2,1,1");
    def("modality_informativeness", 's', "1.0,0.8,0.6,0.4");
    // model
    def("dim", 'i', "64");
    def("depth", 'i', "4");
    def("heads", 'i', "4");
    def("experts", 'i', "8");
    def("expert_hidden", 'i', "128");
    def("top_k", 'i', "2");
    def("routing", 's', "modality");
    def("shared_expert", 'b', "false");
    def("dec_depth", 'i', "2");
    def("dec_dim", 'i', "48");
    def("patch", 'i', "8");
    def("mask_ratio", 'f', canon_double(0.75));
    // pretrain
    def("steps", 'i', "2000");
    def("batch", 'i', "8");
    def("lr", 'f', canon_double(1e-3));
    def("alpha", 'f', canon_double(0.01));
    def("modality_dropout", 'f', canon_double(0.5));
    def("log_every", 'i', "10");
    // prune
    def("prune_modalities", 's', "0");
    def("prune_k", 'i', "2");
    // eval
    def("knn_k", 'i', "5");
    def("eval_modalities", 's', "all");
    def("ft_epochs", 'i', "30");
    def("ft_lr", 'f', canon_double(1e-3));
    def("ft_frozen", 'b', "true");
    def("ft_batch", 'i', "32");
    def("k_shot", 'i', "10");
    def("sweep_kind", 's', "routing");
    // io
    def("checkpoint", 's', "");
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = types_.find(key);
    if (it == types_.end()) throw ConfigError("unknown key: " + key);
    switch (it->second) {
        case 'i': {
            char* end = nullptr;
            (void)std::strtol(value.c_str(), &end, 10);
            if (end == value.c_str() || *end != '\0')
                throw ConfigError("key " + key + " expects an integer, got '" + value + "'");
            values_[key] = value;
            break;
        }
        case 'f': {
            char* end = nullptr;
            double v = std::strtod(value.c_str(), &end);
            if (end == value.c_str() || *end != '\0')
                throw ConfigError("key " + key + " expects a number, got '" + value + "'");
            values_[key] = canon_double(v);
            break;
        }
        case 'b': {
            if (value != "true" && value != "false")
                throw ConfigError("key " + key + " expects true/false, got '" + value + "'");
            values_[key] = value;
            break;
        }
        default: values_[key] = value;
    }
}

long RunConfig::get_int(const std::string& key) const {
    if (!types_.count(key) || types_.at(key) != 'i') throw ConfigError("not an integer key: " + key);
    return std::stol(values_.at(key));
}

double RunConfig::get_double(const std::string& key) const {
    if (!types_.count(key) || types_.at(key) != 'f') throw ConfigError("not a number key: " + key);
    return std::stod(values_.at(key));
}

bool RunConfig::get_bool(const std::string& key) const {
    if (!types_.count(key) || types_.at(key) != 'b') throw ConfigError("not a boolean key: " + key);
    return values_.at(key) == "true";
}

const std::string& RunConfig::get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key: " + key);
    return it->second;
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
    std::vector<int> out;
    for (const auto& tok : split_csv(get_string(key)))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& tok : split_csv(get_string(key)))
        if (!tok.empty()) out.push_back(std::stod(tok));
    return out;
}

std::vector<std::string> RunConfig::get_string_list(const std::string& key) const {
    return split_csv(get_string(key));
}

std::string RunConfig::echo() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
}

DataConfig RunConfig::data_config() const {
    DataConfig cfg;
    cfg.image_size = static_cast<int>(get_int("image_size"));
    cfg.classes = static_cast<int>(get_int("classes"));
    cfg.n_train = static_cast<int>(get_int("n_train"));
    cfg.n_val = static_cast<int>(get_int("n_val"));
    cfg.n_test = static_cast<int>(get_int("n_test"));
    cfg.noise = get_double("noise");
    cfg.seed = static_cast<std::uint64_t>(get_int("seed"));
    auto names = get_string_list("modality_names");
    auto channels = get_int_list("modality_channels");
    auto info = get_double_list("modality_informativeness");
    if (names.size() != channels.size() || names.size() != info.size())
        throw ConfigError("modality_names/channels/informativeness lengths disagree");
    for (std::size_t i = 0; i < names.size(); ++i)
        cfg.modalities.push_back({static_cast<int>(i), names[i], channels[i], info[i]});
    return cfg;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig cfg;
    cfg.dim = static_cast<int>(get_int("dim"));
    cfg.depth = static_cast<int>(get_int("depth"));
    cfg.heads = static_cast<int>(get_int("heads"));
    cfg.experts = static_cast<int>(get_int("experts"));
    cfg.expert_hidden = static_cast<int>(get_int("expert_hidden"));
    cfg.top_k = static_cast<int>(get_int("top_k"));
    cfg.routing = routing_mode_from_string(get_string("routing"));
    cfg.shared_expert = get_bool("shared_expert");
    cfg.dec_depth = static_cast<int>(get_int("dec_depth"));
    cfg.dec_dim = static_cast<int>(get_int("dec_dim"));
    cfg.patch = static_cast<int>(get_int("patch"));
    cfg.mask_ratio = get_double("mask_ratio");
    cfg.image_size = static_cast<int>(get_int("image_size"));
    cfg.modalities = data_config().modalities;
    return cfg;
}

PretrainConfig RunConfig::pretrain_config() const {
    PretrainConfig cfg;
    cfg.steps = get_int("steps");
    cfg.batch = static_cast<int>(get_int("batch"));
    cfg.lr = get_double("lr");
    cfg.alpha = get_double("alpha");
    cfg.modality_dropout_p = get_double("modality_dropout");
    cfg.seed = static_cast<std::uint64_t>(get_int("seed"));
    cfg.log_every = get_int("log_every");
    return cfg;
}

PruneSpec RunConfig::prune_spec() const {
    PruneSpec spec;
    spec.modalities = get_int_list("prune_modalities");
    spec.k = static_cast<int>(get_int("prune_k"));
    return spec;
}

FinetuneConfig RunConfig::finetune_config() const {
    FinetuneConfig cfg;
    cfg.epochs = static_cast<int>(get_int("ft_epochs"));
    cfg.lr = get_double("ft_lr");
    cfg.frozen = get_bool("ft_frozen");
    cfg.batch = static_cast<int>(get_int("ft_batch"));
    cfg.seed = static_cast<std::uint64_t>(get_int("seed"));
    if (get_string("eval_modalities") != "all") cfg.modalities = get_int_list("eval_modalities");
    return cfg;
}

RunConfig parse_config(const std::string& file,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
    RunConfig cfg;
    if (!file.empty()) {
        std::ifstream f(file);
        if (!f) throw ConfigError("cannot open config file: " + file);
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            std::string s = line;
            auto hash = s.find('#');
            if (hash != std::string::npos) s.erase(hash);
            auto trim = [](std::string& x) {
                while (!x.empty() && (x.front() == ' ' || x.front() == '\t')) x.erase(x.begin());
                while (!x.empty() && (x.back() == ' ' || x.back() == '\t' || x.back() == '\r'))
                    x.pop_back();
            };
            trim(s);
            if (s.empty()) continue;
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError("malformed line " + std::to_string(lineno) + " in " + file);
            std::string key = s.substr(0, eq);
            std::string val = s.substr(eq + 1);
            trim(key);
            trim(val);
            cfg.set(key, val);
        }
    }
    for (const auto& [k, v] : overrides) cfg.set(k, v);
    return cfg;
}

}  // namespace mapex
