#include "ternq/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace ternq {

TaskKind parse_task(std::string_view name) {
    if (name == "majority") return TaskKind::majority;
    if (name == "parity") return TaskKind::parity;
    throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

std::string_view to_string(TaskKind task) { return task == TaskKind::majority ? "majority" : "parity"; }

Dataset make_dataset(const TaskSpec& spec, std::size_t count, std::uint64_t seed) {
    const std::size_t label_tokens = spec.kind == TaskKind::majority ? spec.classes : 1;
    if (spec.seq_len < 2) throw std::invalid_argument("synthetic task: sequence length must be at least 2");
    if (spec.vocab < label_tokens + 2) throw std::invalid_argument("synthetic task: vocabulary too small");
    if (spec.kind == TaskKind::majority && spec.classes < 2) throw std::invalid_argument("majority task needs 2+ classes");

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> filler(static_cast<int>(label_tokens) + 1, static_cast<int>(spec.vocab) - 1);
    std::uniform_int_distribution<int> label_token(1, static_cast<int>(label_tokens));
    std::bernoulli_distribution is_label(0.5);

    Dataset data;
    data.classes = spec.kind == TaskKind::majority ? spec.classes : 2;
    data.examples.reserve(count);
    while (data.examples.size() < count) {
        Example ex;
        ex.tokens.assign(spec.seq_len, 0);
        ex.segments.assign(spec.seq_len, 0);
        for (std::size_t i = 1; i < spec.seq_len; ++i) {
            ex.tokens[i] = is_label(rng) ? label_token(rng) : filler(rng);
            ex.segments[i] = i >= spec.seq_len / 2 ? 1 : 0;
        }
        std::vector<int> counts(label_tokens + 1, 0);
        for (std::size_t i = 1; i < spec.seq_len; ++i)
            if (ex.tokens[i] >= 1 && ex.tokens[i] <= static_cast<int>(label_tokens)) ++counts[ex.tokens[i]];
        if (spec.kind == TaskKind::majority) {
            const auto top = std::max_element(counts.begin() + 1, counts.end());
            if (std::count(counts.begin() + 1, counts.end(), *top) > 1) continue;
            ex.label = static_cast<int>(top - counts.begin()) - 1;
        } else {
            ex.label = counts[1] % 2;
        }
        data.examples.push_back(std::move(ex));
    }
    return data;
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& order, std::size_t begin, std::size_t count) {
    Batch b;
    b.batch = count;
    b.seq = data.seq_len();
    for (std::size_t i = begin; i < begin + count; ++i) {
        const Example& ex = data.examples.at(order.at(i));
        if (ex.tokens.size() != b.seq || ex.segments.size() != b.seq) {
            throw InputError("dataset examples must share one sequence length");
        }
        b.tokens.insert(b.tokens.end(), ex.tokens.begin(), ex.tokens.end());
        b.segments.insert(b.segments.end(), ex.segments.begin(), ex.segments.end());
        b.labels.push_back(ex.label);
    }
    return b;
}

std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::mt19937_64* shuffle) {
    if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle != nullptr) std::shuffle(order.begin(), order.end(), *shuffle);
    std::vector<Batch> out;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        out.push_back(make_batch(data, order, i, std::min(batch_size, order.size() - i)));
    }
    return out;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    for (const Example& ex : data.examples) {
        os << nlohmann::json{{"tokens", ex.tokens}, {"segments", ex.segments}, {"label", ex.label}}.dump() << '\n';
    }
    if (!os) throw std::runtime_error("write to '" + path.string() + "' failed");
}

Dataset load_dataset(const std::filesystem::path& path, std::size_t classes) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open dataset '" + path.string() + "'");
    Dataset data;
    std::string line;
    std::size_t lineno = 0;
    int max_label = -1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            Example ex;
            ex.tokens = j.at("tokens").get<std::vector<int>>();
            ex.segments = j.contains("segments") ? j.at("segments").get<std::vector<int>>()
                                                 : std::vector<int>(ex.tokens.size(), 0);
            ex.label = j.at("label").get<int>();
            max_label = std::max(max_label, ex.label);
            data.examples.push_back(std::move(ex));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    data.classes = classes != 0 ? classes : static_cast<std::size_t>(max_label + 1);
    return data;
}

}  // namespace ternq
