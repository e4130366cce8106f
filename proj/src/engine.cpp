#include "shiftpar/engine.h"

#include <algorithm>
#include <numeric>
#include <set>

#include "shiftpar/errors.h"

namespace shiftpar {

std::string ParallelMode::to_string() const {
  return std::string(kind == ModeKind::TP ? "TP(" : "SP(") +
         std::to_string(degree) + ")";
}

std::string_view to_string(BatchKind kind) {
  switch (kind) {
    case BatchKind::Prefill: return "prefill";
    case BatchKind::Decode: return "decode";
    case BatchKind::Verify: return "verify";
  }
  return "unknown";
}

std::string_view to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::FixedTp: return "fixed_tp";
    case PolicyKind::FixedSp: return "fixed_sp";
    case PolicyKind::Shift: return "shift";
  }
  return "unknown";
}

PolicyKind parse_policy(std::string_view text) {
  if (text == "fixed_tp") return PolicyKind::FixedTp;
  if (text == "fixed_sp") return PolicyKind::FixedSp;
  if (text == "shift") return PolicyKind::Shift;
  throw ConfigError("unknown policy '" + std::string(text) +
                    "' (expected fixed_tp, fixed_sp or shift)");
}

std::size_t Batch::total_new_tokens() const {
  std::size_t n = 0;
  for (const Span& s : spans) n += s.tokens.size();
  return n;
}

ParallelMode choose_mode(const ShiftPolicy& policy, const Batch& batch,
                         std::size_t world_size) {
  switch (policy.kind) {
    case PolicyKind::FixedTp: return {ModeKind::TP, world_size};
    case PolicyKind::FixedSp: return {ModeKind::SP, world_size};
    case PolicyKind::Shift: break;
  }
  const bool large =
      batch.total_new_tokens() >= policy.resolved_threshold(world_size);
  return {large ? ModeKind::SP : ModeKind::TP, world_size};
}

std::uint64_t FlopReport::max_device() const {
  return per_device.empty()
             ? 0
             : *std::max_element(per_device.begin(), per_device.end());
}

std::uint64_t StepResult::total_flops() const {
  return std::accumulate(device_flops.begin(), device_flops.end(),
                         std::uint64_t{0});
}

std::uint64_t StepResult::max_device_flops() const {
  return device_flops.empty()
             ? 0
             : *std::max_element(device_flops.begin(), device_flops.end());
}

std::uint64_t StepResult::comm_bytes_per_device() const {
  std::uint64_t total = 0;
  for (const CommRecord& r : comm) total += r.bytes_sent_per_device;
  return total;
}

namespace {

// Contiguous split of n rows over P ranks, remainder to the lowest ranks.
std::vector<std::size_t> shard_sizes(std::size_t n, std::size_t world) {
  std::vector<std::size_t> sizes(world, n / world);
  for (std::size_t r = 0; r < n % world; ++r) ++sizes[r];
  return sizes;
}

}  // namespace

FlopReport flop_count(std::span<const SpanShape> spans, ParallelMode mode,
                      const ModelConfig& config, bool swiftkv_on,
                      std::size_t cut_layer) {
  const std::uint64_t P = mode.degree;
  const std::uint64_t h = config.hidden();
  const std::uint64_t f = config.ffn_dim;
  const std::uint64_t V = config.vocab;
  const std::uint64_t d = config.head_dim;
  const std::uint64_t local_heads = config.n_heads / P;
  const std::uint64_t L = config.n_layers;
  const std::uint64_t cut = swiftkv_on ? cut_layer : L;

  // Global row order: spans in order, positions ascending.
  struct Row {
    std::uint64_t position;
    bool logit;
  };
  std::vector<Row> rows;
  for (const SpanShape& s : spans) {
    for (std::size_t i = 0; i < s.new_tokens; ++i) {
      rows.push_back({s.start + i, s.all_logits || i + 1 == s.new_tokens});
    }
  }
  FlopReport report;
  report.per_device.assign(P, 0);
  if (rows.empty()) return report;

  std::uint64_t attn_all = 0;   // sum over rows of 4*d*(pos+1), one head
  std::uint64_t attn_tail = 0;  // same, logit rows only
  std::uint64_t n_logit = 0;
  for (const Row& r : rows) {
    attn_all += 4 * d * (r.position + 1);
    if (r.logit) {
      attn_tail += 4 * d * (r.position + 1);
      ++n_logit;
    }
  }
  const std::uint64_t n_all = rows.size();

  // Rows held locally and logit rows held locally, per device.
  std::vector<std::uint64_t> local(P), local_logit(P);
  if (mode.kind == ModeKind::TP) {
    std::fill(local.begin(), local.end(), n_all);
    std::fill(local_logit.begin(), local_logit.end(), n_logit);
  } else {
    const auto sizes = shard_sizes(n_all, P);
    std::size_t begin = 0;
    for (std::uint64_t r = 0; r < P; ++r) {
      local[r] = sizes[r];
      for (std::size_t i = begin; i < begin + sizes[r]; ++i) {
        if (rows[i].logit) ++local_logit[r];
      }
      begin += sizes[r];
    }
  }

  for (std::uint64_t r = 0; r < P; ++r) {
    // Width of the projection columns computed on this device.
    const bool tp = mode.kind == ModeKind::TP;
    const std::uint64_t proj_cols = tp ? h / P : h;
    const std::uint64_t ffn_cols = tp ? f / P : f;
    const std::uint64_t vocab_cols = tp ? V / P : V;
    std::uint64_t total = 0;
    auto full_layer = [&](std::uint64_t n, std::uint64_t attn, bool with_kv) {
      std::uint64_t x = 2 * n * h * proj_cols;            // q
      if (with_kv) x += 2 * 2 * n * h * proj_cols;        // k, v
      x += local_heads * attn;                            // attention
      x += 2 * n * proj_cols * h;                         // o
      x += 2 * n * h * ffn_cols + 2 * n * ffn_cols * h;   // mlp
      return x;
    };
    for (std::uint64_t l = 0; l < cut; ++l) total += full_layer(local[r], attn_all, true);
    if (cut < L) {
      total += (L - cut) * 2 * 2 * local[r] * h * proj_cols;  // early KV
      const std::uint64_t tail_rows = tp ? n_logit : local_logit[r];
      total += (L - cut) * full_layer(tail_rows, attn_tail, false);
    }
    const std::uint64_t logit_rows = tp ? n_logit : local_logit[r];
    total += 2 * logit_rows * h * vocab_cols;
    report.per_device[r] = total;
    report.total += total;
  }
  return report;
}

// Per-pass working state.
struct Engine::Pass {
  struct Row {
    std::size_t span;
    std::size_t position;
    bool logit;
  };

  Engine& engine;
  const Batch& batch;
  ParallelMode mode;
  std::size_t world;
  std::vector<KvCache*> caches;  // per span
  std::vector<Row> rows;         // global rows
  // Global row indices held by each device (ascending) and their hidden
  // states, one row per index.
  std::vector<std::vector<std::size_t>> local;
  std::vector<Tensor> x;
  std::vector<FlopCounter> flops;

  Pass(Engine& e, const Batch& b, ParallelMode m)
      : engine(e), batch(b), mode(m), world(m.degree), local(world),
        x(world), flops(world) {
    for (std::size_t s = 0; s < b.spans.size(); ++s) {
      KvCache& cache = e.cache(b.spans[s].request);
      caches.push_back(&cache);
      const std::size_t n = b.spans[s].tokens.size();
      for (std::size_t i = 0; i < n; ++i) {
        rows.push_back({s, cache.token_count() + i,
                        b.spans[s].all_logits || i + 1 == n});
      }
    }
    if (mode.kind == ModeKind::TP) {
      std::vector<std::size_t> all(rows.size());
      std::iota(all.begin(), all.end(), 0);
      std::fill(local.begin(), local.end(), all);
    } else {
      const auto sizes = shard_sizes(rows.size(), world);
      std::size_t begin = 0;
      for (std::size_t r = 0; r < world; ++r) {
        local[r].resize(sizes[r]);
        std::iota(local[r].begin(), local[r].end(), begin);
        begin += sizes[r];
      }
    }
  }

  const ModelWeights& w() const { return engine.weights(); }
  const ModelConfig& cfg() const { return engine.config(); }
  std::size_t head_cols() const { return cfg().hidden() / world; }

  std::size_t max_local() const {
    std::size_t m = 0;
    for (const auto& l : local) m = std::max(m, l.size());
    return m;
  }

  // Rows in attention layout: every device sees the union of all local rows
  // in rank order (identical to `local[r]` under TP).
  std::vector<std::size_t> attention_rows(std::size_t device) const {
    if (mode.kind == ModeKind::TP) return local[device];
    std::vector<std::size_t> all;
    for (const auto& l : local) all.insert(all.end(), l.begin(), l.end());
    return all;
  }

  void embed() {
    engine.fabric_.run([&](std::size_t r) {
      std::vector<Token> tokens;
      std::vector<std::size_t> positions;
      for (std::size_t gi : local[r]) {
        const Row& row = rows[gi];
        const Span& span = batch.spans[row.span];
        tokens.push_back(span.tokens[row.position - caches[row.span]->token_count()]);
        positions.push_back(row.position);
      }
      x[r] = embed_tokens(w(), tokens, positions);
    });
  }

  // Consecutive runs of rows from the same span.
  struct Segment {
    std::size_t span;
    std::size_t begin;  // index into the attention row list
    std::size_t count;
    std::size_t first_position;
  };

  std::vector<Segment> segments(const std::vector<std::size_t>& att) const {
    std::vector<Segment> segs;
    for (std::size_t i = 0; i < att.size(); ++i) {
      const Row& row = rows[att[i]];
      if (!segs.empty() && segs.back().span == row.span &&
          segs.back().first_position + segs.back().count == row.position) {
        ++segs.back().count;
      } else {
        segs.push_back({row.span, i, 1, row.position});
      }
    }
    return segs;
  }

  void append_kv(std::size_t device, std::size_t layer,
                 const std::vector<std::size_t>& att, const Tensor& k,
                 const Tensor& v) {
    for (const Segment& s : segments(att)) {
      caches[s.span]->append(device, layer, slice_rows(k, s.begin, s.begin + s.count),
                             slice_rows(v, s.begin, s.begin + s.count));
    }
  }

  // q is [att.size() x local_heads*d] in attention layout.
  Tensor attention(std::size_t device, std::size_t layer,
                   const std::vector<std::size_t>& att, const Tensor& q) {
    const std::size_t d = cfg().head_dim;
    const std::size_t local_heads = cfg().n_heads / world;
    Tensor out({att.size(), local_heads * d}, cfg().precision);
    for (const Segment& s : segments(att)) {
      const Tensor qs = slice_rows(q, s.begin, s.begin + s.count);
      for (std::size_t j = 0; j < local_heads; ++j) {
        const KvView view = caches[s.span]->read_window(device, layer, j);
        const Tensor o = attend_rows(slice_cols(qs, j * d, (j + 1) * d),
                                     s.first_position, view.keys, view.values,
                                     d, &flops[device]);
        for (std::size_t i = 0; i < s.count; ++i) {
          const auto src = o.row(i);
          std::copy(src.begin(), src.end(), out.row(s.begin + i).begin() + j * d);
        }
      }
    }
    return out;
  }

  void mlp_tp(std::size_t r, std::size_t layer, std::vector<Tensor>& partial) {
    const LayerWeights& lw = w().layers[layer];
    const TpLayerShard& sh = engine.tp_shards_[r].layers[layer];
    const Tensor xn = rms_norm_rows(x[r], lw.mlp_norm, kNormEps);
    const Tensor act = gelu(matmul(xn, sh.w1, &flops[r]));
    partial[r] = matmul(act, sh.w2, &flops[r]);
  }

  void layer_tp(std::size_t layer, bool with_kv) {
    const LayerWeights& lw = w().layers[layer];
    std::vector<Tensor> partial(world);
    engine.fabric_.run([&](std::size_t r) {
      const TpLayerShard& sh = engine.tp_shards_[r].layers[layer];
      const Tensor xn = rms_norm_rows(x[r], lw.attn_norm, kNormEps);
      const Tensor q = matmul(xn, sh.wq, &flops[r]);
      if (with_kv) {
        append_kv(r, layer, local[r], matmul(xn, sh.wk, &flops[r]),
                  matmul(xn, sh.wv, &flops[r]));
      }
      partial[r] = matmul(attention(r, layer, local[r], q), sh.wo, &flops[r]);
    });
    auto sums = engine.fabric_.all_reduce_sum(partial);
    engine.fabric_.run([&](std::size_t r) {
      add_inplace(x[r], sums[r]);
      mlp_tp(r, layer, partial);
    });
    sums = engine.fabric_.all_reduce_sum(partial);
    engine.fabric_.run([&](std::size_t r) { add_inplace(x[r], sums[r]); });
  }

  // Packs rows of `parts` (each [n x h]) into per-destination head blocks
  // [n_max x parts.size()*hc], zero-padded to n_max rows.
  std::vector<Tensor> pack_by_head(const std::vector<Tensor>& parts,
                                   std::size_t n_max) const {
    const std::size_t hc = head_cols();
    std::vector<Tensor> blocks;
    blocks.reserve(world);
    for (std::size_t s = 0; s < world; ++s) {
      Tensor block({n_max, parts.size() * hc}, cfg().precision);
      for (std::size_t p = 0; p < parts.size(); ++p) {
        for (std::size_t i = 0; i < parts[p].rows(); ++i) {
          const auto src = parts[p].row(i).subspan(s * hc, hc);
          std::copy(src.begin(), src.end(), block.row(i).begin() + p * hc);
        }
      }
      blocks.push_back(std::move(block));
    }
    return blocks;
  }

  // Unpacks received head blocks into [sum n_r x hc] tensors, one per packed
  // part, keeping only the real rows of each sender.
  std::vector<Tensor> unpack_heads(const std::vector<Tensor>& received,
                                   std::size_t n_parts) const {
    const std::size_t hc = head_cols();
    std::size_t total = 0;
    for (const auto& l : local) total += l.size();
    std::vector<Tensor> parts(n_parts, Tensor({total, hc}, cfg().precision));
    std::size_t at = 0;
    for (std::size_t r = 0; r < world; ++r) {
      for (std::size_t i = 0; i < local[r].size(); ++i, ++at) {
        const auto src = received[r].row(i);
        for (std::size_t p = 0; p < n_parts; ++p) {
          std::copy(src.begin() + p * hc, src.begin() + (p + 1) * hc,
                    parts[p].row(at).begin());
        }
      }
    }
    return parts;
  }

  void layer_sp(std::size_t layer, bool with_kv) {
    const LayerWeights& lw = w().layers[layer];
    const std::size_t n_max = max_local();
    const std::size_t hc = head_cols();
    std::vector<std::vector<Tensor>> send(world);
    engine.fabric_.run([&](std::size_t r) {
      const ModelWeights& rep = engine.sp_replica(r);
      const Tensor xn = rms_norm_rows(x[r], rep.layers[layer].attn_norm, kNormEps);
      std::vector<Tensor> parts{matmul(xn, rep.layers[layer].wq, &flops[r])};
      if (with_kv) {
        parts.push_back(matmul(xn, rep.layers[layer].wk, &flops[r]));
        parts.push_back(matmul(xn, rep.layers[layer].wv, &flops[r]));
      }
      send[r] = pack_by_head(parts, n_max);
    });
    const auto recv = engine.fabric_.all_to_all(send);

    std::vector<std::vector<Tensor>> back(world);
    engine.fabric_.run([&](std::size_t s) {
      const auto att = attention_rows(s);
      const auto parts = unpack_heads(recv[s], with_kv ? 3 : 1);
      if (with_kv) append_kv(s, layer, att, parts[1], parts[2]);
      const Tensor out = attention(s, layer, att, parts[0]);
      back[s].reserve(world);
      std::size_t at = 0;
      for (std::size_t r = 0; r < world; ++r) {
        Tensor block({n_max, hc}, cfg().precision);
        for (std::size_t i = 0; i < local[r].size(); ++i, ++at) {
          const auto src = out.row(at);
          std::copy(src.begin(), src.end(), block.row(i).begin());
        }
        back[s].push_back(std::move(block));
      }
    });
    const auto recv2 = engine.fabric_.all_to_all(back);

    engine.fabric_.run([&](std::size_t r) {
      const ModelWeights& rep = engine.sp_replica(r);
      const std::size_t n = local[r].size();
      std::vector<Tensor> heads;
      heads.reserve(world);
      for (std::size_t s = 0; s < world; ++s) heads.push_back(slice_rows(recv2[r][s], 0, n));
      const Tensor attn = concat_cols(heads);
      add_inplace(x[r], matmul(attn, rep.layers[layer].wo, &flops[r]));
      const Tensor xn = rms_norm_rows(x[r], lw.mlp_norm, kNormEps);
      const Tensor act = gelu(matmul(xn, rep.layers[layer].w1, &flops[r]));
      add_inplace(x[r], matmul(act, rep.layers[layer].w2, &flops[r]));
    });
  }

  // Early-exit KV for `layer` from the current residual stream.
  void project_kv(std::size_t layer) {
    const LayerWeights& lw = w().layers[layer];
    if (mode.kind == ModeKind::TP) {
      engine.fabric_.run([&](std::size_t r) {
        const TpLayerShard& sh = engine.tp_shards_[r].layers[layer];
        const Tensor xn = rms_norm_rows(x[r], lw.attn_norm, kNormEps);
        append_kv(r, layer, local[r], matmul(xn, sh.wk, &flops[r]),
                  matmul(xn, sh.wv, &flops[r]));
      });
      return;
    }
    const std::size_t n_max = max_local();
    std::vector<std::vector<Tensor>> send(world);
    engine.fabric_.run([&](std::size_t r) {
      const ModelWeights& rep = engine.sp_replica(r);
      const Tensor xn = rms_norm_rows(x[r], rep.layers[layer].attn_norm, kNormEps);
      send[r] = pack_by_head({matmul(xn, rep.layers[layer].wk, &flops[r]),
                              matmul(xn, rep.layers[layer].wv, &flops[r])},
                             n_max);
    });
    const auto recv = engine.fabric_.all_to_all(send);
    engine.fabric_.run([&](std::size_t s) {
      const auto parts = unpack_heads(recv[s], 2);
      append_kv(s, layer, attention_rows(s), parts[0], parts[1]);
    });
  }

  // Drops every local row that does not produce logits.
  void keep_logit_rows() {
    engine.fabric_.run([&](std::size_t r) {
      std::vector<std::size_t> kept_rows;
      std::vector<Tensor> kept;
      for (std::size_t i = 0; i < local[r].size(); ++i) {
        if (rows[local[r][i]].logit) {
          kept_rows.push_back(local[r][i]);
          kept.push_back(slice_rows(x[r], i, i + 1));
        }
      }
      local[r] = std::move(kept_rows);
      x[r] = kept.empty() ? Tensor({0, cfg().hidden()}, cfg().precision)
                          : concat_rows(kept);
    });
  }

  // Returns logits for every logit row in global order.
  Tensor logits() {
    const ModelWeights& weights = w();
    std::vector<Tensor> contrib(world);
    std::vector<std::vector<std::size_t>> logit_rows(world);
    std::vector<Tensor> xf(world);
    engine.fabric_.run([&](std::size_t r) {
      std::vector<Tensor> picked;
      for (std::size_t i = 0; i < local[r].size(); ++i) {
        if (rows[local[r][i]].logit) {
          logit_rows[r].push_back(local[r][i]);
          picked.push_back(slice_rows(x[r], i, i + 1));
        }
      }
      xf[r] = picked.empty() ? Tensor({0, cfg().hidden()}, cfg().precision)
                             : rms_norm_rows(concat_rows(picked),
                                             weights.final_norm, kNormEps);
    });
    if (mode.kind == ModeKind::TP) {
      engine.fabric_.run([&](std::size_t r) {
        contrib[r] = transpose(matmul(xf[r], engine.tp_shards_[r].head, &flops[r]));
      });
      return transpose(engine.fabric_.all_gather(contrib)[0]);
    }
    std::size_t c_max = 0;
    for (const auto& l : logit_rows) c_max = std::max(c_max, l.size());
    engine.fabric_.run([&](std::size_t r) {
      const Tensor part = matmul(xf[r], engine.sp_replica(r).head, &flops[r]);
      Tensor padded({c_max, cfg().vocab}, cfg().precision);
      std::copy(part.data().begin(), part.data().end(), padded.data().begin());
      contrib[r] = std::move(padded);
    });
    const Tensor gathered = engine.fabric_.all_gather(contrib)[0];
    std::vector<Tensor> ordered;
    for (std::size_t r = 0; r < world; ++r) {
      for (std::size_t i = 0; i < logit_rows[r].size(); ++i) {
        ordered.push_back(slice_rows(gathered, r * c_max + i, r * c_max + i + 1));
      }
    }
    return concat_rows(ordered);
  }
};

Engine::Engine(std::shared_ptr<const ModelWeights> weights, EngineOptions options)
    : weights_(std::move(weights)),
      options_(options),
      fabric_(options.world_size, options.execution),
      current_mode_{ModeKind::TP, options.world_size} {
  SHIFTPAR_CHECK(weights_ != nullptr, "engine: null weights");
  weights_->config.validate_for_world(options_.world_size);
  if (options_.swiftkv.enabled) options_.swiftkv.validate(weights_->config);
  tp_shards_.reserve(options_.world_size);
  for (std::size_t r = 0; r < options_.world_size; ++r) {
    tp_shards_.push_back(tp_shard_view(*weights_, r, options_.world_size));
  }
}

const ModelWeights& Engine::sp_replica(std::size_t rank) const {
  SHIFTPAR_CHECK(rank < world_size(), "sp_replica: rank out of range");
  // Every device holds the same immutable replica.
  return *weights_;
}

void Engine::open_request(RequestId id, std::size_t capacity) {
  SHIFTPAR_CHECK(!has_request(id),
                 "open_request: request " + std::to_string(id) + " already open");
  caches_.emplace(id, KvCache(config(), world_size(), capacity));
}

void Engine::close_request(RequestId id) { caches_.erase(id); }

KvCache& Engine::cache(RequestId id) {
  auto it = caches_.find(id);
  SHIFTPAR_CHECK(it != caches_.end(),
                 "unknown request " + std::to_string(id));
  return it->second;
}

const KvCache& Engine::cache(RequestId id) const {
  auto it = caches_.find(id);
  SHIFTPAR_CHECK(it != caches_.end(),
                 "unknown request " + std::to_string(id));
  return it->second;
}

std::uint64_t Engine::total_cache_writes() const {
  std::uint64_t total = 0;
  for (const auto& [id, cache] : caches_) total += cache.write_count();
  return total;
}

std::vector<SpanShape> Engine::span_shapes(const Batch& batch) const {
  std::vector<SpanShape> shapes;
  for (const Span& s : batch.spans) {
    shapes.push_back({cache(s.request).token_count(), s.tokens.size(), s.all_logits});
  }
  return shapes;
}

void Engine::validate_batch(const Batch& batch) const {
  SHIFTPAR_CHECK(!batch.spans.empty(), "batch has no spans");
  std::set<RequestId> seen;
  for (const Span& s : batch.spans) {
    SHIFTPAR_CHECK(!s.tokens.empty(), "span for request " +
                                          std::to_string(s.request) +
                                          " has no tokens");
    SHIFTPAR_CHECK(seen.insert(s.request).second,
                   "request " + std::to_string(s.request) +
                       " appears twice in one batch");
    if (batch.kind == BatchKind::Decode) {
      SHIFTPAR_CHECK(s.tokens.size() == 1,
                     "decode spans carry exactly one token");
    }
    const KvCache& c = cache(s.request);
    if (c.token_count() + s.tokens.size() > c.capacity()) {
      throw ContractError("sequence overflow for request " +
                          std::to_string(s.request) + ": " +
                          std::to_string(c.token_count() + s.tokens.size()) +
                          " tokens exceed capacity " +
                          std::to_string(c.capacity()));
    }
    for (Token t : s.tokens) {
      if (t >= config().vocab) {
        throw ContractError("token id " + std::to_string(t) +
                            " outside vocabulary of " +
                            std::to_string(config().vocab));
      }
    }
  }
}

StepResult Engine::step(const Batch& batch) {
  return step(batch, choose_mode(options_.policy, batch, world_size()));
}

StepResult Engine::step(const Batch& batch, ParallelMode mode) {
  const bool early_exit = options_.swiftkv.enabled &&
                          batch.kind == BatchKind::Prefill &&
                          options_.swiftkv.resolved_cut(config()) < config().n_layers;
  return run(batch, mode, early_exit);
}

StepResult Engine::forward_tp(const Batch& batch) {
  return run(batch, {ModeKind::TP, world_size()}, false);
}

StepResult Engine::forward_sp(const Batch& batch) {
  return run(batch, {ModeKind::SP, world_size()}, false);
}

StepResult Engine::prefill_swiftkv(const Batch& batch) {
  return prefill_swiftkv(batch, choose_mode(options_.policy, batch, world_size()));
}

StepResult Engine::prefill_swiftkv(const Batch& batch, ParallelMode mode) {
  SHIFTPAR_CHECK(options_.swiftkv.enabled,
                 "prefill_swiftkv called with SwiftKV disabled");
  SHIFTPAR_CHECK(batch.kind == BatchKind::Prefill,
                 "prefill_swiftkv requires a prefill batch");
  return run(batch, mode, true);
}

StepResult Engine::run(const Batch& batch, ParallelMode mode, bool swiftkv) {
  SHIFTPAR_CHECK(mode.degree == world_size(),
                 "mode degree must equal the fabric world size");
  validate_batch(batch);
  const std::size_t cut =
      swiftkv ? options_.swiftkv.resolved_cut(config()) : config().n_layers;
  if (cut < config().n_layers) {
    for (const Span& s : batch.spans) {
      SHIFTPAR_CHECK(!s.all_logits,
                     "early-exit prefill only produces last-position logits");
    }
  }

  StepResult result;
  result.step_id = next_step_++;
  result.mode = mode;
  result.used_swiftkv = swiftkv && cut < config().n_layers;
  const std::uint64_t writes_before = total_cache_writes();
  result.mode_switched = !mode_log_.empty() && mode != current_mode_;
  current_mode_ = mode;
  result.cache_writes_during_switch = total_cache_writes() - writes_before;
  mode_log_.push_back(mode);

  fabric_.begin_step(result.step_id);
  const std::size_t first_record = fabric_.records().size();
  Pass pass(*this, batch, mode);
  try {
    pass.embed();
    const bool tp = mode.kind == ModeKind::TP;
    for (std::size_t l = 0; l < cut; ++l) {
      tp ? pass.layer_tp(l, true) : pass.layer_sp(l, true);
    }
    if (cut < config().n_layers) {
      for (std::size_t l = cut; l < config().n_layers; ++l) pass.project_kv(l);
      pass.keep_logit_rows();
      for (std::size_t l = cut; l < config().n_layers; ++l) {
        tp ? pass.layer_tp(l, false) : pass.layer_sp(l, false);
      }
    }
    const Tensor logits = pass.logits();
    std::size_t at = 0;
    for (const Span& s : batch.spans) {
      const std::size_t n = s.all_logits ? s.tokens.size() : 1;
      result.logits.push_back(slice_rows(logits, at, at + n));
      at += n;
    }
    for (KvCache* c : pass.caches) c->commit();
  } catch (...) {
    for (KvCache* c : pass.caches) c->discard_staged();
    throw;
  }
  for (const FlopCounter& f : pass.flops) result.device_flops.push_back(f.flops);
  const auto& records = fabric_.records();
  result.comm.assign(records.begin() + static_cast<std::ptrdiff_t>(first_record),
                     records.end());
  return result;
}

}  // namespace shiftpar
