#include "mapex/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "mapex/errors.hpp"
#include "mapex/optim.hpp"
#include "mapex/prune.hpp"
#include "mapex/rng.hpp"

namespace mapex {

ProbeResult knn_eval(const std::vector<std::vector<double>>& train_feats,
                     const std::vector<int>& train_labels,
                     const std::vector<std::vector<double>>& test_feats,
                     const std::vector<int>& test_labels, int k, int classes) {
    if (train_feats.empty() || test_feats.empty()) throw DataError("empty split in knn_eval");
    if (k > static_cast<int>(train_feats.size())) throw DataError("knn k exceeds train size");
    std::vector<long> correct(classes, 0), total(classes, 0);
    long hits = 0;
    for (std::size_t q = 0; q < test_feats.size(); ++q) {
        std::vector<std::pair<double, int>> dist(train_feats.size());
        for (std::size_t i = 0; i < train_feats.size(); ++i) {
            double d = 0.0;
            for (std::size_t j = 0; j < train_feats[i].size(); ++j) {
                double x = train_feats[i][j] - test_feats[q][j];
                d += x * x;
            }
            dist[i] = {d, static_cast<int>(i)};
        }
        std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
        std::vector<int> votes(classes, 0);
        for (int n = 0; n < k; ++n) ++votes[train_labels[dist[n].second]];
        int best = 0;
        for (int c = 1; c < classes; ++c)
            if (votes[c] > votes[best]) best = c;
        ++total[test_labels[q]];
        if (best == test_labels[q]) {
            ++hits;
            ++correct[test_labels[q]];
        }
    }
    ProbeResult r;
    r.accuracy = static_cast<double>(hits) / test_feats.size();
    r.knn_k = k;
    for (int c = 0; c < classes; ++c)
        r.per_class.push_back(total[c] ? static_cast<double>(correct[c]) / total[c] : 0.0);
    return r;
}

std::vector<std::vector<double>> extract_features(const MapexModel& model,
                                                  const std::vector<MultiModalSample>& samples,
                                                  const std::vector<int>& modalities,
                                                  const RoutingPolicy* policy) {
    std::vector<std::vector<double>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(forward_features(model, s, modalities, policy));
    return out;
}

std::vector<int> split_labels(const std::vector<MultiModalSample>& samples) {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label);
    return out;
}

// ---- fine-tuning -------------------------------------------------------------

namespace {

double head_eval_loss(const Tensor& feats, const Linear& head, const std::vector<int>& labels) {
    Tensor logits = add(matmul(feats, head.w), head.b);
    return softmax_cross_entropy(logits, labels).item();
}

double head_eval_acc(const Tensor& feats, const Linear& head, const std::vector<int>& labels) {
    Tensor logits = add(matmul(feats, head.w), head.b);
    int C = logits.cols();
    long hits = 0;
    for (int i = 0; i < logits.rows(); ++i) {
        const double* row = &logits.value()[static_cast<std::size_t>(i) * C];
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (row[c] > row[best]) best = c;
        if (best == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / logits.rows();
}

Tensor stack_features(const std::vector<std::vector<double>>& feats) {
    int n = static_cast<int>(feats.size());
    int d = static_cast<int>(feats[0].size());
    std::vector<double> buf;
    buf.reserve(static_cast<std::size_t>(n) * d);
    for (const auto& f : feats) buf.insert(buf.end(), f.begin(), f.end());
    return Tensor::from({n, d}, std::move(buf));
}

}  // namespace

ProbeResult finetune(MapexModel& model, const Dataset& data, const FinetuneConfig& cfg) {
    std::vector<int> mods = cfg.modalities;
    if (mods.empty())
        for (const auto& m : model.cfg.modalities) mods.push_back(m.id);
    for (int mid : mods)
        if (!model.cfg.has_modality(mid))
            throw ModalityUnavailableError("finetune modality " + std::to_string(mid));

    Rng rng(mix_seed(cfg.seed, 0xf17e));
    Linear head;
    head.w = Tensor::zeros({model.cfg.dim, data.cfg.classes}, true);
    for (double& v : head.w.value()) v = 0.02 * rng.normal();
    head.b = Tensor::zeros({1, data.cfg.classes}, true);

    auto train_labels = split_labels(data.train);
    auto val_labels = split_labels(data.val);
    auto test_labels = split_labels(data.test);

    ProbeResult result;
    result.modalities = mods;
    result.seed = cfg.seed;

    std::vector<Tensor> params = {head.w, head.b};
    if (!cfg.frozen)
        for (auto& [name, t] : named_parameters(model)) params.push_back(t);
    AdamW opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.frozen ? 0.0 : 0.05});

    // frozen path: features computed once
    Tensor train_f, val_f, test_f;
    if (cfg.frozen) {
        train_f = stack_features(extract_features(model, data.train, mods));
        val_f = stack_features(extract_features(model, data.val, mods));
        test_f = stack_features(extract_features(model, data.test, mods));
    }

    auto eval_acc_full = [&](const std::vector<MultiModalSample>& samples,
                             const std::vector<int>& labels) {
        Tensor f = stack_features(extract_features(model, samples, mods));
        return head_eval_acc(f, head, labels);
    };
    auto eval_loss_full = [&](const std::vector<MultiModalSample>& samples,
                              const std::vector<int>& labels) {
        Tensor f = stack_features(extract_features(model, samples, mods));
        return head_eval_loss(f, head, labels);
    };

    if (cfg.epochs == 0) {
        result.accuracy = cfg.frozen ? head_eval_acc(test_f, head, test_labels)
                                     : eval_acc_full(data.test, test_labels);
        result.per_class.assign(data.cfg.classes, result.accuracy);
        return result;
    }

    double best_val = 1e300;
    double best_test_acc = 0.0;
    int stall = 0;
    std::vector<int> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t off = 0; off < order.size(); off += cfg.batch) {
            std::size_t hi = std::min(order.size(), off + cfg.batch);
            std::vector<int> idx(order.begin() + off, order.begin() + hi);
            Tensor feats;
            std::vector<int> labels;
            if (cfg.frozen) {
                feats = gather_rows(train_f, idx);
            } else {
                std::vector<Tensor> rows;
                for (int i : idx) rows.push_back(forward_features_tensor(model, data.train[i], mods));
                feats = concat_rows(rows);
            }
            for (int i : idx) labels.push_back(train_labels[i]);
            Tensor loss = softmax_cross_entropy(add(matmul(feats, head.w), head.b), labels);
            opt.zero_grad();
            backward(loss);
            opt.step();
        }
        double val_loss = cfg.frozen ? head_eval_loss(val_f, head, val_labels)
                                     : eval_loss_full(data.val, val_labels);
        if (val_loss < best_val - 1e-12) {
            best_val = val_loss;
            best_test_acc = cfg.frozen ? head_eval_acc(test_f, head, test_labels)
                                       : eval_acc_full(data.test, test_labels);
            stall = 0;
        } else {
            ++stall;
            if (stall >= 3) {
                opt.set_lr(opt.lr() * 0.5);
                stall = 0;
            }
        }
    }
    result.accuracy = best_test_acc;
    // per-class accuracy at the final head state
    {
        Tensor f = cfg.frozen ? test_f : stack_features(extract_features(model, data.test, mods));
        Tensor logits = add(matmul(f, head.w), head.b);
        int C = logits.cols();
        std::vector<long> correct(C, 0), total(C, 0);
        for (int i = 0; i < logits.rows(); ++i) {
            const double* row = &logits.value()[static_cast<std::size_t>(i) * C];
            int best = 0;
            for (int c = 1; c < C; ++c)
                if (row[c] > row[best]) best = c;
            ++total[test_labels[i]];
            if (best == test_labels[i]) ++correct[test_labels[i]];
        }
        for (int c = 0; c < C; ++c)
            result.per_class.push_back(total[c] ? static_cast<double>(correct[c]) / total[c] : 0.0);
    }
    return result;
}

// ---- specialization ----------------------------------------------------------

double SpecializationMatrix::diagonal_mean() const {
    double s = 0.0;
    for (std::size_t i = 0; i < acc.size(); ++i) s += acc[i][i];
    return s / acc.size();
}

double SpecializationMatrix::off_diagonal_mean() const {
    double s = 0.0;
    long n = 0;
    for (std::size_t i = 0; i < acc.size(); ++i)
        for (std::size_t j = 0; j < acc[i].size(); ++j)
            if (i != j) {
                s += acc[i][j];
                ++n;
            }
    return s / n;
}

SpecializationMatrix specialization_matrix(const MapexModel& model, const Dataset& data, int knn_k,
                                           int prune_k) {
    const int m = static_cast<int>(model.cfg.modalities.size());
    auto train_labels = split_labels(data.train);
    auto test_labels = split_labels(data.test);
    SpecializationMatrix sm;
    sm.acc.assign(m, std::vector<double>(m, 0.0));
    for (int r = 0; r < m; ++r) {
        PruneSpec spec{{model.cfg.modalities[r].id}, prune_k};
        auto retained = retained_expert_sets(model, spec);
        RoutingPolicy policy = [&retained, prune_k](const MapexModel& mm, int layer, int mid) {
            return route_restricted(mm, layer, mid, retained[layer], prune_k);
        };
        for (int c = 0; c < m; ++c) {
            std::vector<int> mods = {model.cfg.modalities[c].id};
            auto train_f = extract_features(model, data.train, mods, &policy);
            auto test_f = extract_features(model, data.test, mods, &policy);
            sm.acc[r][c] =
                knn_eval(train_f, train_labels, test_f, test_labels, knn_k, data.cfg.classes)
                    .accuracy;
        }
    }
    return sm;
}

// ---- sweeps -------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

// pretrain a fresh model, prune it per modality and report single-modality
// k-NN accuracy rows
void per_modality_knn_rows(const std::string& kind, const std::string& cell,
                           const std::string& param1, const std::string& param2,
                           MapexModel& model, const Dataset& data, const SweepConfig& cfg,
                           std::uint64_t cell_seed, std::vector<SweepRow>& rows) {
    auto train_labels = split_labels(data.train);
    auto test_labels = split_labels(data.test);
    for (const auto& spec : model.cfg.modalities) {
        MapexModel pruned = prune(model, {{spec.id}, cfg.prune_k});
        auto train_f = extract_features(pruned, data.train, {spec.id});
        auto test_f = extract_features(pruned, data.test, {spec.id});
        double acc = knn_eval(train_f, train_labels, test_f, test_labels, cfg.knn_k,
                              data.cfg.classes)
                         .accuracy;
        rows.push_back({kind, cell, param1, param2, spec.id, acc, cell_seed, param_count(pruned)});
    }
}

}  // namespace

std::vector<SweepRow> sweep(const std::string& kind, const Dataset& data, const SweepConfig& cfg) {
    std::vector<SweepRow> rows;
    int cell = 0;
    auto cell_seed = [&](int c) { return mix_seed(cfg.seed, 100 + c); };

    if (kind == "routing") {
        for (RoutingMode mode :
             {RoutingMode::Deterministic, RoutingMode::PosEmbed, RoutingMode::Modality}) {
            ModelConfig mc = cfg.model;
            mc.routing = mode;
            if (mode == RoutingMode::Deterministic) mc.top_k = 1;
            MapexModel model = init_model(mc, cell_seed(cell));
            PretrainConfig pc = cfg.pretrain;
            pc.seed = cell_seed(cell);
            pretrain(model, data, pc);
            per_modality_knn_rows(kind, "cell" + std::to_string(cell), to_string(mode), "", model,
                                  data, cfg, cell_seed(cell), rows);
            ++cell;
        }
    } else if (kind == "topk") {
        MapexModel model = init_model(cfg.model, cell_seed(0));
        PretrainConfig pc = cfg.pretrain;
        pc.seed = cell_seed(0);
        pretrain(model, data, pc);
        auto train_labels = split_labels(data.train);
        auto test_labels = split_labels(data.test);
        for (int k = 1; k <= std::min(5, cfg.model.experts); ++k) {
            for (const auto& spec : model.cfg.modalities) {
                MapexModel pruned = prune(model, {{spec.id}, k});
                auto train_f = extract_features(pruned, data.train, {spec.id});
                auto test_f = extract_features(pruned, data.test, {spec.id});
                double acc = knn_eval(train_f, train_labels, test_f, test_labels, cfg.knn_k,
                                      data.cfg.classes)
                                 .accuracy;
                rows.push_back({kind, "cell" + std::to_string(k), std::to_string(k), "", spec.id,
                                acc, cell_seed(0), param_count(pruned)});
            }
        }
    } else if (kind == "dropout") {
        for (double p : {0.0, 0.1, 0.5}) {
            MapexModel model = init_model(cfg.model, cell_seed(cell));
            PretrainConfig pc = cfg.pretrain;
            pc.modality_dropout_p = p;
            pc.seed = cell_seed(cell);
            pretrain(model, data, pc);
            per_modality_knn_rows(kind, "cell" + std::to_string(cell), fmt_double(p), "", model,
                                  data, cfg, cell_seed(cell), rows);
            ++cell;
        }
    } else if (kind == "expert_size") {
        int budget = cfg.model.experts * cfg.model.expert_hidden;
        for (int e : {cfg.model.experts / 2, cfg.model.experts, cfg.model.experts * 2}) {
            if (e < cfg.model.top_k || budget % e != 0) continue;
            ModelConfig mc = cfg.model;
            mc.experts = e;
            mc.expert_hidden = budget / e;
            MapexModel model = init_model(mc, cell_seed(cell));
            PretrainConfig pc = cfg.pretrain;
            pc.seed = cell_seed(cell);
            pretrain(model, data, pc);
            per_modality_knn_rows(kind, "cell" + std::to_string(cell), std::to_string(e),
                                  std::to_string(mc.expert_hidden), model, data, cfg,
                                  cell_seed(cell), rows);
            ++cell;
        }
    } else {
        throw ConfigError("unknown sweep kind: " + kind);
    }
    return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open " + path);
    f << "sweep_kind,cell_id,param_1,param_2,modality,accuracy,seed,params_count\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.accuracy);
        f << r.sweep_kind << "," << r.cell_id << "," << r.param_1 << "," << r.param_2 << ","
          << r.modality << "," << buf << "," << r.seed << "," << r.params_count << "\n";
    }
}

void write_probe_csv(const ProbeResult& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open " + path);
    f << "accuracy,knn_k,modalities,checkpoint,seed";
    for (std::size_t c = 0; c < r.per_class.size(); ++c) f << ",class_" << c;
    f << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", r.accuracy);
    f << buf << "," << r.knn_k << ",";
    for (std::size_t i = 0; i < r.modalities.size(); ++i) {
        if (i) f << ";";
        f << r.modalities[i];
    }
    f << "," << r.checkpoint_id << "," << r.seed;
    for (double a : r.per_class) {
        std::snprintf(buf, sizeof(buf), "%.17g", a);
        f << "," << buf;
    }
    f << "\n";
}

ProbeResult few_shot_eval(MapexModel& model, const Dataset& data, int k_shot, std::uint64_t seed,
                          const FinetuneConfig& ft) {
    Dataset subset = few_shot_subset(data, k_shot, seed);
    FinetuneConfig cfg = ft;
    cfg.seed = seed;
    ProbeResult r = finetune(model, subset, cfg);
    r.seed = seed;
    r.checkpoint_id = "k_shot=" + std::to_string(k_shot);
    return r;
}

}  // namespace mapex
