#include "memaudit/evaluator.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace memaudit {

std::string divergence_name(DivergenceClass c) {
    switch (c) {
        case DivergenceClass::simple_repetition: return "simple_repetition";
        case DivergenceClass::verbatim_memorization: return "verbatim_memorization";
        case DivergenceClass::non_meaningful_divergence: return "non_meaningful_divergence";
    }
    return "?";
}

DivergenceClass classify_divergence(TokenView generation, TokenView instructed,
                                    const MatchReport& match, double rep_threshold) {
    if (instructed.empty()) {
        throw std::invalid_argument("classify_divergence: empty instructed sequence");
    }
    if (generation.empty()) {
        return DivergenceClass::non_meaningful_divergence;
    }
    // Fraction of the generation covered by occurrences of the instructed
    // sequence (consecutive copies merge into one covered run).
    const std::size_t n = generation.size();
    const std::size_t m = instructed.size();
    std::size_t covered = 0;
    std::size_t i = 0;
    while (i + m <= n) {
        bool hit = true;
        for (std::size_t j = 0; j < m; ++j) {
            if (generation[i + j] != instructed[j]) {
                hit = false;
                break;
            }
        }
        if (hit) {
            covered += m;
            i += m;
        } else {
            ++i;
        }
    }
    const double coverage = static_cast<double>(covered) / static_cast<double>(n);
    if (coverage >= rep_threshold) {
        return DivergenceClass::simple_repetition;
    }
    return match.matched ? DivergenceClass::verbatim_memorization
                         : DivergenceClass::non_meaningful_divergence;
}

double pre_emission_entropy(const EntropyProfile& profile, std::int64_t emission_start,
                            int w) {
    if (w < 1) {
        throw std::invalid_argument("pre_emission_entropy: window must be >= 1");
    }
    if (emission_start < w) {
        throw std::invalid_argument(
            "pre_emission_entropy: not enough preceding positions");
    }
    if (emission_start > static_cast<std::int64_t>(profile.entropies.size())) {
        throw std::invalid_argument("pre_emission_entropy: emission_start out of range");
    }
    double sum = 0.0;
    for (std::int64_t k = emission_start - w; k < emission_start; ++k) {
        sum += profile.entropies[static_cast<std::size_t>(k)];
    }
    return sum / static_cast<double>(w);
}

namespace detail_eval {

MetricsReport aggregate_samples(std::vector<SampleResult> samples,
                                const ExperimentConfig& cfg) {
    MetricsReport report;
    report.attack = attack_name(cfg.attack.kind);
    report.n_prompts = cfg.n_prompts;
    report.seed = cfg.seed;
    report.window = cfg.match.window;
    report.tolerances = cfg.match.tolerances;
    report.tolerance_rates.assign(report.tolerances.size(), 0.0);

    std::int64_t canary_hits = 0;
    for (const auto& sample : samples) {
        if (sample.match.matched && sample.match.tolerance_class) {
            for (std::size_t k = 0; k < report.tolerances.size(); ++k) {
                if (*sample.match.tolerance_class <= report.tolerances[k]) {
                    report.tolerance_rates[k] += 1.0;
                }
            }
        }
        if (sample.canary_hit) ++canary_hits;
        if (sample.divergence) {
            ++report.divergence_counts[divergence_name(*sample.divergence)];
        } else {
            ++report.divergence_counts[sample.match.matched ? "memorized"
                                                            : "non_memorized"];
        }
    }
    const double denom = static_cast<double>(cfg.n_prompts);
    for (double& rate : report.tolerance_rates) rate = rate * 100.0 / denom;
    report.canary_hit_rate = static_cast<double>(canary_hits) * 100.0 / denom;

    auto rate_at = [&](int tol) {
        for (std::size_t k = 0; k < report.tolerances.size(); ++k) {
            if (report.tolerances[k] == tol) return report.tolerance_rates[k];
        }
        return report.tolerance_rates.empty() ? 0.0 : report.tolerance_rates.back();
    };
    report.vm_rate = report.tolerance_rates.empty() ? 0.0 : report.tolerance_rates.front();
    report.m5_rate = rate_at(5);
    report.m10_rate = rate_at(10);

    report.samples = std::move(samples);
    return report;
}

PrecursorResult precursor_from_samples(const std::vector<SampleResult>& samples, int w,
                                       std::int64_t) {
    PrecursorResult result;
    double mem_sum = 0.0, non_sum = 0.0;
    std::int64_t mem_n = 0, non_n = 0;
    for (const auto& sample : samples) {
        if (sample.match.matched) {
            if (sample.pre_emission_mean_bits) {
                result.rows.push_back(
                    PrecursorRow{sample.sample_id, true, *sample.pre_emission_mean_bits});
                mem_sum += *sample.pre_emission_mean_bits;
                ++mem_n;
            }
        } else if (sample.early_gen_mean_bits) {
            result.rows.push_back(
                PrecursorRow{sample.sample_id, false, *sample.early_gen_mean_bits});
            non_sum += *sample.early_gen_mean_bits;
            ++non_n;
        }
    }
    (void)w;
    if (mem_n > 0) result.mean_memorized = mem_sum / static_cast<double>(mem_n);
    if (non_n > 0) result.mean_non_memorized = non_sum / static_cast<double>(non_n);
    return result;
}

}  // namespace detail_eval

// ----------------------------- serialization -----------------------------

namespace {

nlohmann::json sample_to_json(const SampleResult& sample) {
    nlohmann::json obj;
    obj["sample_id"] = sample.sample_id;
    obj["snippet"] = sample.snippet.tokens;
    obj["provenance"] = sample.snippet.provenance;
    obj["generation_len"] = sample.generation.size();
    obj["generation"] = sample.generation;
    obj["diversity"] = sample.diversity;
    obj["match"] = nlohmann::json::parse(match_report_to_json(sample.match));
    obj["canary_hit"] = sample.canary_hit;
    if (sample.divergence) {
        obj["divergence"] = divergence_name(*sample.divergence);
    }
    if (sample.pre_emission_mean_bits) {
        obj["pre_emission_mean_bits"] = *sample.pre_emission_mean_bits;
    }
    if (sample.early_gen_mean_bits) {
        obj["early_gen_mean_bits"] = *sample.early_gen_mean_bits;
    }
    return obj;
}

}  // namespace

std::string metrics_report_to_json(const MetricsReport& report) {
    nlohmann::json obj;
    obj["attack"] = report.attack;
    obj["n_prompts"] = report.n_prompts;
    obj["seed"] = report.seed;
    obj["window"] = report.window;
    obj["tolerances"] = report.tolerances;
    obj["tolerance_rates"] = report.tolerance_rates;
    obj["vm_rate"] = report.vm_rate;
    obj["m5_rate"] = report.m5_rate;
    obj["m10_rate"] = report.m10_rate;
    obj["canary_hit_rate"] = report.canary_hit_rate;
    obj["divergence_counts"] = report.divergence_counts;
    return obj.dump(2);
}

void save_metrics_report(const MetricsReport& report, const std::string& json_path,
                         const std::string& jsonl_sidecar_path) {
    {
        std::ofstream out(json_path, std::ios::trunc);
        if (!out) {
            throw std::runtime_error("save_metrics_report: cannot open " + json_path);
        }
        out << metrics_report_to_json(report) << "\n";
    }
    std::ofstream side(jsonl_sidecar_path, std::ios::trunc);
    if (!side) {
        throw std::runtime_error("save_metrics_report: cannot open " +
                                 jsonl_sidecar_path);
    }
    for (const auto& sample : report.samples) {
        side << sample_to_json(sample).dump() << "\n";
    }
}

void save_entropy_csv(const MetricsReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("save_entropy_csv: cannot open " + path);
    }
    out << "sample_id,position,entropy_bits\n";
    char buf[96];
    for (const auto& sample : report.samples) {
        for (std::size_t k = 0; k < sample.profile.entropies.size(); ++k) {
            std::snprintf(buf, sizeof(buf), "%d,%lld,%.12g\n", sample.sample_id,
                          static_cast<long long>(sample.profile.positions[k]),
                          sample.profile.entropies[k]);
            out << buf;
        }
    }
}

void save_precursor_csv(const PrecursorResult& result, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("save_precursor_csv: cannot open " + path);
    }
    out << "sample_id,class,mean_entropy_bits\n";
    char buf[96];
    for (const auto& row : result.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%s,%.12g\n", row.sample_id,
                      row.memorized ? "memorized" : "non_memorized",
                      row.mean_entropy_bits);
        out << buf;
    }
}

}  // namespace memaudit
