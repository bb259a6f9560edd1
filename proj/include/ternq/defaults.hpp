#pragma once

#include <cstddef>
#include <cstdint>

namespace ternq::defaults {

// Synthetic majority task and micro model.
inline constexpr std::size_t train_size = 2000;
inline constexpr std::size_t eval_size = 500;
inline constexpr std::size_t seq_len = 16;
inline constexpr std::size_t vocab = 32;
inline constexpr std::size_t layers = 2;
inline constexpr std::size_t hidden = 32;
inline constexpr std::size_t heads = 2;
inline constexpr std::size_t ffn = 128;

// Training budget.
inline constexpr std::size_t batch_size = 32;
inline constexpr std::size_t teacher_epochs = 8;
inline constexpr double teacher_lr = 2e-3;
inline constexpr std::size_t student_epochs = 4;
inline constexpr double student_lr = 2e-3;

/// Dataset seeds derived from a run seed.
inline constexpr std::uint64_t train_seed(std::uint64_t seed) { return seed * 2 + 1; }
inline constexpr std::uint64_t eval_seed(std::uint64_t seed) { return seed * 2 + 2; }

}  // namespace ternq::defaults
