#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mapex/data.hpp"
#include "mapex/eval.hpp"
#include "mapex/model.hpp"
#include "mapex/pretrain.hpp"

namespace mapex {

// Flat key=value run configuration. Every key has a typed default; unknown
// keys are rejected so generated sweep configs fail loudly on typos.
class RunConfig {
public:
    RunConfig();  // all defaults

    void set(const std::string& key, const std::string& value);  // validates key + type

    long get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    const std::string& get_string(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const;
    std::vector<double> get_double_list(const std::string& key) const;
    std::vector<std::string> get_string_list(const std::string& key) const;

    // canonical text form; parsing the echo reproduces this config exactly
    std::string echo() const;

    DataConfig data_config() const;
    ModelConfig model_config() const;
    PretrainConfig pretrain_config() const;
    PruneSpec prune_spec() const;
    FinetuneConfig finetune_config() const;

private:
    std::map<std::string, std::string> values_;
    std::map<std::string, char> types_;  // 'i', 'f', 'b', 's'
};

// file is flat `key = value` text (empty path -> defaults only); overrides
// are (key, value) pairs and take precedence
RunConfig parse_config(const std::string& file, const std::vector<std::pair<std::string, std::string>>& overrides);

}  // namespace mapex
