#include "oawam/sequence.hpp"

#include <algorithm>
#include <cmath>

#include "oawam/errors.hpp"

namespace oawam::seq {

const char* kind_name(TokenKind k) {
  switch (k) {
    case TokenKind::Text: return "TEXT";
    case TokenKind::Vq: return "VQ";
    case TokenKind::Slot: return "SLOT";
    case TokenKind::State: return "STATE";
    case TokenKind::Action: return "ACTION";
    case TokenKind::Special: return "SPECIAL";
  }
  return "?";
}

Vocab Vocab::from_config(const Config& cfg) {
  Vocab v;
  v.label_vocab = cfg.sim.label_vocab;
  v.state_dims = 4;
  v.state_bins = cfg.model.state_bins;
  v.act_dims = cfg.model.act_dim;
  v.action_bins = cfg.model.action_bins;
  v.codebook = cfg.sim.codebook;
  return v;
}

bool SequenceLayout::is_padded_slot(int pos) const {
  if (kinds[static_cast<std::size_t>(pos)] != TokenKind::Slot) return false;
  const int t = frame_group[static_cast<std::size_t>(pos)];
  const int s = slot_index[static_cast<std::size_t>(pos)];
  return valid_slot[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)] == 0;
}

std::vector<int> SequenceLayout::slot_positions() const {
  std::vector<int> out;
  for (int i = 0; i < length(); ++i) {
    if (kinds[static_cast<std::size_t>(i)] == TokenKind::Slot) out.push_back(i);
  }
  return out;
}

std::vector<int> SequenceLayout::slot_positions_of_frame(int t) const {
  std::vector<int> out;
  for (int i = 0; i < length(); ++i) {
    if (kinds[static_cast<std::size_t>(i)] == TokenKind::Slot &&
        frame_group[static_cast<std::size_t>(i)] == t) {
      out.push_back(i);
    }
  }
  return out;
}

nlohmann::json SequenceLayout::dump() const {
  nlohmann::json arr = nlohmann::json::array();
  for (int i = 0; i < length(); ++i) {
    arr.push_back({{"pos", i},
                   {"token_id", token_ids[static_cast<std::size_t>(i)]},
                   {"kind", kind_name(kinds[static_cast<std::size_t>(i)])},
                   {"frame_group", frame_group[static_cast<std::size_t>(i)]},
                   {"slot_index", slot_index[static_cast<std::size_t>(i)]},
                   {"position_id", position_ids[static_cast<std::size_t>(i)]}});
  }
  return arr;
}

int sequence_length(int T, int n_max, int grid_cells, int n_state_dims, int act_dims) {
  int L = 1 + 3 + n_state_dims;  // BOS, instruction, state
  for (int t = 0; t < T; ++t) {
    L += 1 + grid_cells + 1 + (n_max + 1) + 1 + (t < T - 1 ? act_dims : 0) + 1;
  }
  return L + 1;  // [ACT_Q]
}

SequenceLayout build_layout(const WindowTokens& window, int T, int n_max,
                            const Vocab& vocab, bool rope_share) {
  if (static_cast<int>(window.vq_codes.size()) != T ||
      static_cast<int>(window.valid_slot.size()) != T) {
    throw ContractError("build_layout: window does not hold exactly T frames");
  }
  if (static_cast<int>(window.past_actions.size()) != T - 1) {
    throw ContractError("build_layout: expected T-1 past-action rows");
  }

  SequenceLayout lay;
  lay.T = T;
  lay.n_max = n_max;
  lay.valid_slot = window.valid_slot;
  lay.rope_share = rope_share;

  auto emit = [&](int token_id, TokenKind kind, int group, int slot) {
    lay.token_ids.push_back(token_id);
    lay.kinds.push_back(kind);
    lay.frame_group.push_back(group);
    lay.slot_index.push_back(slot);
  };

  emit(Vocab::kBos, TokenKind::Special, -1, -1);
  emit(vocab.verb_id(window.instruction[0]), TokenKind::Text, -1, -1);
  emit(vocab.label_id(window.instruction[1]), TokenKind::Text, -1, -1);
  emit(vocab.label_id(window.instruction[2]), TokenKind::Text, -1, -1);
  for (int d = 0; d < vocab.state_dims; ++d) {
    emit(vocab.state_id(d, window.state_bins[static_cast<std::size_t>(d)]),
         TokenKind::State, -1, -1);
  }

  for (int t = 0; t < T; ++t) {
    emit(Vocab::kFrameBos, TokenKind::Special, t, -1);
    for (const int code : window.vq_codes[static_cast<std::size_t>(t)]) {
      emit(vocab.vq_id(code), TokenKind::Vq, t, -1);
    }
    emit(Vocab::kSlotBos, TokenKind::Special, t, -1);
    for (int s = 0; s <= n_max; ++s) {
      emit(Vocab::kSlotPlaceholder, TokenKind::Slot, t, s);
    }
    emit(Vocab::kSlotEos, TokenKind::Special, t, -1);
    if (t < T - 1) {
      for (int d = 0; d < vocab.act_dims; ++d) {
        emit(vocab.action_id(d, window.past_actions[static_cast<std::size_t>(t)]
                                                   [static_cast<std::size_t>(d)]),
             TokenKind::Action, t, -1);
      }
    }
    emit(Vocab::kFrameEos, TokenKind::Special, t, -1);
  }

  emit(Vocab::kActQ, TokenKind::Special, T, -1);
  lay.act_q_pos = lay.length() - 1;
  lay.position_ids = build_position_ids(lay);
  return lay;
}

std::vector<int> build_position_ids(const SequenceLayout& layout) {
  std::vector<int> pos(static_cast<std::size_t>(layout.length()));
  int c = 0;
  for (int i = 0; i < layout.length(); ++i) {
    if (layout.kinds[static_cast<std::size_t>(i)] == TokenKind::Slot &&
        layout.rope_share) {
      pos[static_cast<std::size_t>(i)] = c;  // whole slot block shares its start
    } else {
      pos[static_cast<std::size_t>(i)] = c++;
    }
  }
  return pos;
}

ad::MaskMat build_attention_mask(const SequenceLayout& layout) {
  const int L = layout.length();
  ad::MaskMat allow(L, L);
  allow.setZero();
  for (int i = 0; i < L; ++i) {
    if (layout.is_padded_slot(i)) continue;  // padding never attends
    const int gi = layout.frame_group[static_cast<std::size_t>(i)];
    for (int j = 0; j < L; ++j) {
      if (layout.is_padded_slot(j)) continue;  // nor is it attended
      if (i == layout.act_q_pos) {
        allow(i, j) = 1;  // [ACT_Q] sees all
        continue;
      }
      const int gj = layout.frame_group[static_cast<std::size_t>(j)];
      if (gj < gi) {
        allow(i, j) = 1;  // block-causal across groups; prefix visible to all
      } else if (gj == gi) {
        const bool both_slots =
            layout.kinds[static_cast<std::size_t>(i)] == TokenKind::Slot &&
            layout.kinds[static_cast<std::size_t>(j)] == TokenKind::Slot && gi >= 0;
        if (both_slots || j <= i) allow(i, j) = 1;  // within-group: slots
                                                    // bidirectional, rest causal
      }
    }
  }
  return allow;
}

std::shared_ptr<const std::vector<int>> shared_slot_positions(const SequenceLayout& layout) {
  return std::make_shared<const std::vector<int>>(layout.slot_positions());
}

int quantize(double value, int bins, double lo, double hi) {
  if (bins < 2) throw ContractError("quantize: bins must be >= 2");
  const double v = std::min(hi, std::max(lo, value));
  const int bin = static_cast<int>(std::floor((v - lo) / (hi - lo) * bins));
  return std::min(bins - 1, std::max(0, bin));
}

double dequantize(int bin, int bins, double lo, double hi) {
  return lo + (static_cast<double>(bin) + 0.5) * (hi - lo) / bins;
}

}  // namespace oawam::seq
