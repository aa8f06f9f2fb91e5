#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace homodistil {

/// batch x seq_len token ids.
using TokenMatrix = Eigen::Array<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// batch x seq_len, true at padded positions.
using PadMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Label value for positions that carry no MLM target.
inline constexpr std::int32_t kIgnoreLabel = -100;

}  // namespace homodistil
