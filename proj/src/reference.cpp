#include "shiftpar/reference.h"

#include <numeric>
#include <string>

#include "shiftpar/errors.h"

namespace shiftpar {

ReferenceOutput forward_reference(const ModelWeights& weights,
                                  std::span<const Token> tokens,
                                  FlopCounter* counter) {
  const ModelConfig& c = weights.config;
  const std::size_t n = tokens.size();
  SHIFTPAR_CHECK(n >= 1, "forward_reference: empty token sequence");
  if (n > c.max_seq) {
    throw ContractError("sequence of " + std::to_string(n) +
                        " tokens exceeds max_seq " + std::to_string(c.max_seq));
  }
  const std::size_t d = c.head_dim;
  std::vector<std::size_t> positions(n);
  std::iota(positions.begin(), positions.end(), 0);
  Tensor x = embed_tokens(weights, tokens, positions);
  KvCache cache(c, 1, n);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerWeights& w = weights.layers[l];
    const Tensor xn = rms_norm_rows(x, w.attn_norm, kNormEps);
    const Tensor q = matmul(xn, w.wq, counter);
    const Tensor k = matmul(xn, w.wk, counter);
    const Tensor v = matmul(xn, w.wv, counter);
    cache.append(0, l, k, v);
    std::vector<Tensor> heads;
    heads.reserve(c.n_heads);
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      heads.push_back(causal_attention(slice_cols(q, hd * d, (hd + 1) * d),
                                       slice_cols(k, hd * d, (hd + 1) * d),
                                       slice_cols(v, hd * d, (hd + 1) * d),
                                       counter));
    }
    add_inplace(x, matmul(concat_cols(heads), w.wo, counter));
    const Tensor xn2 = rms_norm_rows(x, w.mlp_norm, kNormEps);
    const Tensor act = gelu(matmul(xn2, w.w1, counter));
    add_inplace(x, matmul(act, w.w2, counter));
  }
  cache.commit();
  const Tensor xf = rms_norm_rows(x, weights.final_norm, kNormEps);
  return ReferenceOutput{matmul(xf, weights.head, counter), std::move(cache)};
}

std::vector<Token> reference_greedy(const ModelWeights& weights,
                                    std::span<const Token> prompt,
                                    std::size_t new_tokens) {
  std::vector<Token> seq(prompt.begin(), prompt.end());
  std::vector<Token> out;
  for (std::size_t i = 0; i < new_tokens; ++i) {
    const ReferenceOutput ref = forward_reference(weights, seq);
    const Token next = static_cast<Token>(argmax_row(ref.logits, seq.size() - 1));
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

}  // namespace shiftpar
