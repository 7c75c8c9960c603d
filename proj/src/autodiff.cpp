// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/autodiff.hpp"

namespace mergeforge {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kLinear: return "linear";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kRmsNorm: return "rms_norm";
    case OpKind::kSilu: return "silu";
    case OpKind::kGather: return "gather_rows";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSumAxis: return "sum_axis";
    case OpKind::kMeanAxis: return "mean_axis";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kAttention: return "causal_attention";
    case OpKind::kPick: return "pick";
    case OpKind::kAbs: return "abs";
    case OpKind::kCosine: return "cosine";
  }
  return "unknown";
}

}  // namespace mergeforge
