#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ternq/model.hpp"

namespace ternq {

struct Example {
    std::vector<int> tokens;
    std::vector<int> segments;
    int label = 0;

    bool operator==(const Example&) const = default;
};

struct Dataset {
    std::vector<Example> examples;
    std::size_t classes = 0;

    bool empty() const { return examples.empty(); }
    std::size_t size() const { return examples.size(); }
    std::size_t seq_len() const { return examples.empty() ? 0 : examples.front().tokens.size(); }
};

enum class TaskKind { majority, parity };

TaskKind parse_task(std::string_view name);
std::string_view to_string(TaskKind task);

/// Token layout shared by the synthetic tasks: 0 is the leading [CLS] slot, 1..classes are
/// label tokens (majority) or 1 is the marked token (parity), the rest is filler.
struct TaskSpec {
    TaskKind kind = TaskKind::majority;
    std::size_t seq_len = 16;
    std::size_t vocab = 32;
    std::size_t classes = 4;
};

/// Majority: label = most frequent label token among positions 1..seq-1; ties are resampled.
/// Parity: label = number of marked tokens mod 2.
Dataset make_dataset(const TaskSpec& spec, std::size_t count, std::uint64_t seed);

/// Collates examples [begin, begin + count) of `order` into a batch.
Batch make_batch(const Dataset& data, const std::vector<std::size_t>& order, std::size_t begin, std::size_t count);
/// Consecutive batches of `batch_size` (the last may be shorter) over a permutation or the identity.
std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::mt19937_64* shuffle = nullptr);

/// One JSON object per line: {"tokens": [...], "segments": [...], "label": k}.
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path, std::size_t classes = 0);

}  // namespace ternq
