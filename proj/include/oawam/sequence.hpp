#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "oawam/config.hpp"
#include "oawam/tape.hpp"

namespace oawam::seq {

enum class TokenKind : std::uint8_t { Text, Vq, Slot, State, Action, Special };

const char* kind_name(TokenKind k);

// Toy vocabulary layout: dedicated special ids up front, then instruction
// text, discretized proprioception, discretized past actions, and the VQ
// code block (contiguous, as the id-range weighting requires).
struct Vocab {
  static constexpr int kBos = 0;
  static constexpr int kFrameBos = 1;
  static constexpr int kFrameEos = 2;
  static constexpr int kSlotBos = 3;
  static constexpr int kSlotEos = 4;
  static constexpr int kSlotPlaceholder = 5;
  static constexpr int kActQ = 6;
  static constexpr int kNumSpecial = 7;
  static constexpr int kNumVerbs = 2;

  int label_vocab = 0;
  int state_dims = 0;
  int state_bins = 0;
  int act_dims = 0;
  int action_bins = 0;
  int codebook = 0;

  int text_base() const { return kNumSpecial; }
  int verb_id(int v) const { return text_base() + v; }
  int label_id(int label) const { return text_base() + kNumVerbs + label; }
  int state_base() const { return text_base() + kNumVerbs + label_vocab; }
  int state_id(int dim, int bin) const { return state_base() + dim * state_bins + bin; }
  int action_base() const { return state_base() + state_dims * state_bins; }
  int action_id(int dim, int bin) const { return action_base() + dim * action_bins + bin; }
  int vq_base() const { return action_base() + act_dims * action_bins; }
  int vq_id(int code) const { return vq_base() + code; }
  int size() const { return vq_base() + codebook; }

  static Vocab from_config(const Config& cfg);
};

// Tokenized inputs for one T-frame window (already discretized).
struct WindowTokens {
  std::array<int, 3> instruction{};            // verb, target label, reference label
  std::vector<int> state_bins;                 // current proprioception, one bin per dim
  std::vector<std::vector<int>> vq_codes;      // T x grid^2 code ids
  std::vector<std::vector<int>> past_actions;  // (T-1) x act_dims bins
  std::vector<std::vector<std::uint8_t>> valid_slot;  // T x (n_max+1)
};

struct SequenceLayout {
  int T = 0;
  int n_max = 0;
  std::vector<int> token_ids;
  std::vector<TokenKind> kinds;
  std::vector<int> frame_group;  // -1 prefix, 0..T-1 frames, T for [ACT_Q]
  std::vector<int> slot_index;   // -1 for non-slot positions
  std::vector<int> position_ids;
  std::vector<std::vector<std::uint8_t>> valid_slot;  // per frame, n_max+1
  int act_q_pos = -1;
  bool rope_share = true;

  int length() const { return static_cast<int>(token_ids.size()); }
  bool is_padded_slot(int pos) const;
  // SLOT positions in template order (frame-major, slot 0..n_max).
  std::vector<int> slot_positions() const;
  std::vector<int> slot_positions_of_frame(int t) const;

  nlohmann::json dump() const;
};

int sequence_length(int T, int n_max, int grid_cells, int n_state_dims, int act_dims);

// Template order: BOS, instruction, state, then per frame
// [F_BOS, VQ codes, S_BOS, slots, S_EOS, past actions (t < T-1), F_EOS],
// then the trailing [ACT_Q].
SequenceLayout build_layout(const WindowTokens& window, int T, int n_max,
                            const Vocab& vocab, bool rope_share);

// Sequential positions for non-slot tokens; all slots of a frame share the
// position at their block start when rope_share is on.
std::vector<int> build_position_ids(const SequenceLayout& layout);

// The four-rule visibility mask; padded slot rows and columns are all-false.
ad::MaskMat build_attention_mask(const SequenceLayout& layout);

std::shared_ptr<const std::vector<int>> shared_slot_positions(const SequenceLayout& layout);

// masked_scatter analog: overwrite SLOT rows (template order) with the slot
// embeddings; every other row of `base` is bitwise untouched.
template <typename S>
ad::Var<S> scatter_slots(ad::Var<S> base, ad::Var<S> slot_embeddings,
                         const SequenceLayout& layout) {
  const auto positions = shared_slot_positions(layout);
  if (static_cast<Eigen::Index>(positions->size()) !=
      base.tape->value(slot_embeddings).rows()) {
    throw ContractError("scatter_slots: slot embedding count does not match layout");
  }
  return ad::rows_scatter(base, slot_embeddings, positions);
}

int quantize(double value, int bins, double lo, double hi);
double dequantize(int bin, int bins, double lo, double hi);

}  // namespace oawam::seq
