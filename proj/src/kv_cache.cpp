#include "shiftpar/kv_cache.h"

#include <algorithm>
#include <sstream>

#include "shiftpar/errors.h"

namespace shiftpar {

std::string LayoutFingerprint::to_string() const {
  std::ostringstream os;
  os << "P=" << world_size << " L=" << n_layers << " H/P=" << local_heads
     << " d=" << head_dim << " T=" << token_count << " axes=" << axis_order
     << " precision=" << shiftpar::to_string(precision) << " heads=";
  for (std::size_t r = 0; r < partition.heads.size(); ++r) {
    os << (r ? "|" : "");
    for (std::size_t i = 0; i < partition.heads[r].size(); ++i) {
      os << (i ? "," : "") << partition.heads[r][i];
    }
  }
  return os.str();
}

KvCache::KvCache(const ModelConfig& config, std::size_t world_size,
                 std::size_t capacity)
    : n_layers_(config.n_layers),
      local_heads_(0),
      head_dim_(config.head_dim),
      capacity_(capacity),
      precision_(config.precision),
      partition_(partition_heads(config.n_heads, world_size)) {
  if (capacity == 0 || capacity > config.max_seq) {
    throw ConfigError("cache capacity " + std::to_string(capacity) +
                      " must be in [1, max_seq=" +
                      std::to_string(config.max_seq) + "]");
  }
  local_heads_ = partition_.heads_per_rank();
  const std::size_t per_device = n_layers_ * local_heads_ * capacity_ * head_dim_;
  keys_.assign(world_size, std::vector<double>(per_device, 0.0));
  values_.assign(world_size, std::vector<double>(per_device, 0.0));
  staged_.assign(world_size, std::vector<std::size_t>(n_layers_, 0));
  writes_.assign(world_size, 0);
}

std::size_t KvCache::offset(std::size_t layer, std::size_t local_head,
                            std::size_t token) const {
  return ((layer * local_heads_ + local_head) * capacity_ + token) * head_dim_;
}

void KvCache::append(std::size_t device, std::size_t layer, const Tensor& k_rows,
                     const Tensor& v_rows) {
  SHIFTPAR_CHECK(device < world_size() && layer < n_layers_,
                 "kv append: device/layer out of range");
  const std::size_t width = local_heads_ * head_dim_;
  SHIFTPAR_CHECK(k_rows.rank() == 2 && k_rows.cols() == width &&
                     k_rows.shape() == v_rows.shape(),
                 "kv append: expected K and V of shape [n x " +
                     std::to_string(width) + "], got " +
                     shape_string(k_rows.shape()) + " and " +
                     shape_string(v_rows.shape()));
  const std::size_t n = k_rows.rows();
  const std::size_t start = token_count_ + staged_[device][layer];
  if (start + n > capacity_) {
    throw ContractError("kv cache overflow: " + std::to_string(start + n) +
                        " tokens exceed capacity " + std::to_string(capacity_));
  }
  auto& kd = keys_[device];
  auto& vd = values_[device];
  for (std::size_t i = 0; i < n; ++i) {
    const auto kr = k_rows.row(i);
    const auto vr = v_rows.row(i);
    for (std::size_t j = 0; j < local_heads_; ++j) {
      const std::size_t at = offset(layer, j, start + i);
      std::copy_n(kr.begin() + j * head_dim_, head_dim_, kd.begin() + at);
      std::copy_n(vr.begin() + j * head_dim_, head_dim_, vd.begin() + at);
    }
  }
  staged_[device][layer] += n;
  writes_[device] += 2 * n * width;
}

void KvCache::commit() {
  const std::size_t n = staged_[0][0];
  for (const auto& dev : staged_) {
    for (std::size_t s : dev) {
      if (s != n) {
        throw ContractError(
            "kv commit: inconsistent staged row counts across layers/devices");
      }
    }
  }
  token_count_ += n;
  for (auto& dev : staged_) std::fill(dev.begin(), dev.end(), 0);
}

void KvCache::discard_staged() {
  for (auto& dev : staged_) std::fill(dev.begin(), dev.end(), 0);
}

void KvCache::truncate(std::size_t tokens) {
  SHIFTPAR_CHECK(tokens <= token_count_,
                 "kv truncate: cannot grow the cache by truncation");
  discard_staged();
  token_count_ = tokens;
}

KvView KvCache::read_window(std::size_t device, std::size_t layer,
                            std::size_t local_head) const {
  if (device >= world_size() || layer >= n_layers_ || local_head >= local_heads_) {
    throw ContractError("kv read_window: index out of range (device " +
                        std::to_string(device) + ", layer " +
                        std::to_string(layer) + ", local head " +
                        std::to_string(local_head) + ")");
  }
  const std::size_t tokens = token_count_ + staged_[device][layer];
  const std::size_t at = offset(layer, local_head, 0);
  KvView view;
  view.keys = std::span<const double>(keys_[device]).subspan(at, tokens * head_dim_);
  view.values =
      std::span<const double>(values_[device]).subspan(at, tokens * head_dim_);
  view.tokens = tokens;
  view.head_dim = head_dim_;
  return view;
}

LayoutFingerprint KvCache::fingerprint() const {
  LayoutFingerprint fp;
  fp.world_size = world_size();
  fp.n_layers = n_layers_;
  fp.local_heads = local_heads_;
  fp.head_dim = head_dim_;
  fp.partition = partition_;
  fp.token_count = token_count_;
  fp.axis_order = "layer,head,token,dim";
  fp.precision = precision_;
  return fp;
}

std::uint64_t KvCache::write_count() const {
  std::uint64_t total = 0;
  for (std::uint64_t w : writes_) total += w;
  return total;
}

}  // namespace shiftpar
