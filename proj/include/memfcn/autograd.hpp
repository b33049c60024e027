#ifndef MEMFCN_AUTOGRAD_HPP
#define MEMFCN_AUTOGRAD_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "memfcn/common.hpp"
#include "memfcn/conv.hpp"
#include "memfcn/inplace_abn.hpp"
#include "memfcn/layers.hpp"
#include "memfcn/losses.hpp"
#include "memfcn/tensor.hpp"

namespace memfcn {

enum class BufferPolicy { Standard, InplaceABN };
enum class PrecisionPolicy { F32, MixedPrecision };

// Plan records shapes only (no data, no compute) — the planner's mode.
// Train executes with training semantics and records save-sets for backward.
// Infer executes eval-mode forward (running statistics) and retains nothing.
enum class TapeMode { Plan, Train, Infer };

enum class OpKind {
  Leaf, Conv3d, ConvTranspose3d, NormAct, MaxPool2, ConcatC, Add,
  LeakyRelu, Mul, Scale, SumAll, DiceCeLoss,
};

struct Value {
  int id = -1;
};

struct ValueRec {
  Shape shape;
  DType dtype = DType::F32;
  bool is_param = false;
  bool requires_grad = false;
  bool needs_grad = false;  // requires_grad, or produced from something that does
  int storage_key = -1;
  int producer = -1;  // node index; -1 for leaves
  std::string name;
  Tensor data;  // defined in Train/Infer modes only
};

struct NodeRec {
  OpKind kind = OpKind::Leaf;
  std::string name;
  std::vector<int> inputs;
  std::vector<int> outputs;
  std::vector<int> save_set;
  std::vector<std::pair<int, int>> inplace_aliases;  // (input id, output id)

  // op attributes
  Conv3dSpec conv;
  bool has_bias = false;
  double eps = 0.0, momentum = 0.0, slope = 0.0, gamma_floor = 0.0;
  double scalar = 0.0;                 // Scale factor
  double wce = 1.0, wd = 1.0, eps_d = kDiceEps;
  std::int64_t ca = 0, cb = 0;         // ConcatC split extents
  Shape in_shape;                      // MaxPool2 input extents
  std::vector<double> mean, var;       // NormAct batch statistics (aux, not buffers)
  DiceCeAux loss_aux;                  // DiceCeLoss reduction state
};

struct RetainedEntry {
  std::string node;     // node that saved it
  std::string tensor;   // value name
  Shape shape;
  DType dtype;
  std::int64_t bytes = 0;  // 0 when shared with an earlier entry
  bool shared = false;
};

class Tape {
 public:
  Tape(TapeMode mode, BufferPolicy policy) : mode_(mode), policy_(policy) {}

  TapeMode mode() const { return mode_; }
  BufferPolicy policy() const { return policy_; }

  // ------------------------------------------------------------- leaves

  Value leaf(const Tensor& t, std::string name, bool is_param, bool requires_grad) {
    check_config(mode_ != TapeMode::Plan, "leaf with data on a planning tape; use leaf_meta");
    ValueRec v;
    v.shape = t.shape();
    v.dtype = t.dtype();
    v.is_param = is_param;
    v.requires_grad = requires_grad;
    v.needs_grad = requires_grad;
    v.data = t;
    v.storage_key = key_for(t);
    v.name = std::move(name);
    return push_value(std::move(v));
  }

  Value leaf_meta(Shape shape, DType dt, std::string name, bool is_param, bool requires_grad) {
    check_config(mode_ == TapeMode::Plan, "leaf_meta is for planning tapes");
    ValueRec v;
    v.shape = std::move(shape);
    v.dtype = dt;
    v.is_param = is_param;
    v.requires_grad = requires_grad;
    v.needs_grad = requires_grad;
    v.storage_key = next_key_++;
    v.name = std::move(name);
    return push_value(std::move(v));
  }

  // ------------------------------------------------------------- ops

  Value conv3d(Value x, Value w, std::optional<Value> b, const Conv3dSpec& spec,
               std::string name) {
    const ValueRec& xv = rec(x);
    const ValueRec& wv = rec(w);
    Shape outs = conv3d_out_shape(xv.shape, wv.shape, spec);
    if (b) check_shape(rec(*b).shape == Shape{wv.shape[0]}, "conv3d: bias extent != Co");
    NodeRec n;
    n.kind = OpKind::Conv3d;
    n.name = name;
    n.conv = spec;
    n.has_bias = b.has_value();
    n.inputs = {x.id, w.id};
    if (b) n.inputs.push_back(b->id);
    Value out;
    if (mode_ == TapeMode::Plan) {
      out = meta_output(std::move(outs), xv.dtype, name + ".out");
    } else {
      Tensor bt;
      const Tensor* bp = nullptr;
      if (b) { bt = rec(*b).data; bp = &bt; }
      out = data_output(memfcn::conv3d(xv.data, wv.data, bp, spec), name + ".out");
    }
    n.outputs = {out.id};
    n.save_set = {x.id, w.id};
    finish_node(std::move(n), {x.id, w.id, b ? b->id : -1}, out);
    return out;
  }

  Value conv_transpose3d(Value x, Value w, std::string name) {
    const ValueRec& xv = rec(x);
    const ValueRec& wv = rec(w);
    Shape outs = conv_transpose3d_out_shape(xv.shape, wv.shape);
    NodeRec n;
    n.kind = OpKind::ConvTranspose3d;
    n.name = name;
    n.inputs = {x.id, w.id};
    Value out = mode_ == TapeMode::Plan
                    ? meta_output(std::move(outs), xv.dtype, name + ".out")
                    : data_output(memfcn::conv_transpose3d(xv.data, wv.data), name + ".out");
    n.outputs = {out.id};
    n.save_set = {x.id, w.id};
    finish_node(std::move(n), {x.id, w.id}, out);
    return out;
  }

  /* One node per norm+activation site. Standard policy saves {x, z};
     InplaceABN saves {z} only and z aliases x's storage (the executor
     literally overwrites the buffer). Batch statistics live in the node
     record — they are parameters of the backward formula, not activation
     buffers, and stay out of the retained-buffer pool. */
  Value norm_act(Value x, Value gamma, Value beta, double eps, double momentum, double slope,
                 double gamma_floor, BnRunning* running, std::string name) {
    const ValueRec& xv = rec(x);
    check_shape(xv.shape.size() == 5, "norm_act: input must be N,C,D,H,W");
    const std::int64_t m = xv.shape[0] * xv.shape[2] * xv.shape[3] * xv.shape[4];
    check_shape(m >= 2 || mode_ == TapeMode::Infer,
                "norm_act: needs at least 2 elements per channel in train mode");
    NodeRec n;
    n.kind = OpKind::NormAct;
    n.name = name;
    n.eps = eps;
    n.momentum = momentum;
    n.slope = slope;
    n.gamma_floor = gamma_floor;
    n.inputs = {x.id, gamma.id, beta.id};
    Value z;
    if (mode_ == TapeMode::Plan) {
      z = meta_output(Shape(xv.shape), xv.dtype, name + ".z");
      if (policy_ == BufferPolicy::InplaceABN)
        values_[static_cast<std::size_t>(z.id)].storage_key = xv.storage_key;
    } else if (mode_ == TapeMode::Infer) {
      check_config(running != nullptr, "norm_act: eval mode needs running statistics");
      z = data_output(bn_act_forward_eval(xv.data, rec(gamma).data, rec(beta).data, *running,
                                          eps, slope, /*apply_act=*/true),
                      name + ".z");
    } else if (policy_ == BufferPolicy::InplaceABN) {
      Tensor buf = xv.data;  // shares storage; forward overwrites it
      IabnStats st = iabn_forward(buf, rec(gamma).data, rec(beta).data, eps, momentum, slope,
                                  running);
      n.mean = std::move(st.mean);
      n.var = std::move(st.var);
      z = data_output(buf, name + ".z");  // same storage key as x by identity
    } else {
      Tensor zt;
      BnResult r = bn_act_forward_train(xv.data, rec(gamma).data, rec(beta).data, eps, momentum,
                                        slope, /*apply_act=*/true, &zt, running);
      n.mean = std::move(r.mean);
      n.var = std::move(r.var);
      z = data_output(std::move(zt), name + ".z");
    }
    n.outputs = {z.id};
    if (policy_ == BufferPolicy::InplaceABN) {
      n.save_set = {z.id};
      n.inplace_aliases = {{x.id, z.id}};
    } else {
      n.save_set = {x.id, z.id};
    }
    finish_node(std::move(n), {x.id, gamma.id, beta.id}, z);
    return z;
  }

  struct PoolValues {
    Value output;
    Value index;
  };

  PoolValues maxpool2(Value x, std::string name) {
    const ValueRec& xv = rec(x);
    check_shape(xv.shape.size() == 5, "maxpool2: input must be N,C,D,H,W");
    check_shape(xv.shape[2] % 2 == 0 && xv.shape[3] % 2 == 0 && xv.shape[4] % 2 == 0,
                "maxpool2: spatial extents must be even");
    NodeRec n;
    n.kind = OpKind::MaxPool2;
    n.name = name;
    n.inputs = {x.id};
    n.in_shape = xv.shape;
    Value out, idx;
    if (mode_ == TapeMode::Plan) {
      Shape outs{xv.shape[0], xv.shape[1], xv.shape[2] / 2, xv.shape[3] / 2, xv.shape[4] / 2};
      out = meta_output(Shape(outs), xv.dtype, name + ".out");
      idx = meta_output(std::move(outs), xv.dtype, name + ".idx");
    } else {
      MaxPoolResult r = memfcn::maxpool2(xv.data);
      out = data_output(std::move(r.output), name + ".out");
      idx = data_output(std::move(r.index), name + ".idx");
    }
    n.outputs = {out.id, idx.id};
    n.save_set = mode_ == TapeMode::Infer ? std::vector<int>{} : std::vector<int>{idx.id};
    finish_node(std::move(n), {x.id}, out);
    values_[static_cast<std::size_t>(idx.id)].needs_grad = false;
    return {out, idx};
  }

  Value concat_c(Value a, Value b, std::string name) {
    const ValueRec& av = rec(a);
    const ValueRec& bv = rec(b);
    NodeRec n;
    n.kind = OpKind::ConcatC;
    n.name = name;
    n.inputs = {a.id, b.id};
    n.ca = av.shape[1];
    n.cb = bv.shape[1];
    Value out;
    if (mode_ == TapeMode::Plan) {
      check_shape(av.shape.size() == 5 && bv.shape.size() == 5 &&
                      av.shape[0] == bv.shape[0] && av.shape[2] == bv.shape[2] &&
                      av.shape[3] == bv.shape[3] && av.shape[4] == bv.shape[4],
                  "channel_concat: non-channel extents differ");
      Shape outs = av.shape;
      outs[1] = av.shape[1] + bv.shape[1];
      out = meta_output(std::move(outs), av.dtype, name + ".out");
    } else {
      out = data_output(channel_concat(av.data, bv.data), name + ".out");
    }
    n.outputs = {out.id};
    finish_node(std::move(n), {a.id, b.id}, out);
    return out;
  }

  Value add(Value a, Value b, std::string name) {
    const ValueRec& av = rec(a);
    check_shape(av.shape == rec(b).shape, "add: shape mismatch");
    NodeRec n;
    n.kind = OpKind::Add;
    n.name = name;
    n.inputs = {a.id, b.id};
    Value out = mode_ == TapeMode::Plan
                    ? meta_output(Shape(av.shape), av.dtype, name + ".out")
                    : data_output(memfcn::add(av.data, rec(b).data), name + ".out");
    n.outputs = {out.id};
    finish_node(std::move(n), {a.id, b.id}, out);
    return out;
  }

  Value leaky_relu(Value x, double slope, std::string name) {
    const ValueRec& xv = rec(x);
    NodeRec n;
    n.kind = OpKind::LeakyRelu;
    n.name = name;
    n.slope = slope;
    n.inputs = {x.id};
    Value out = mode_ == TapeMode::Plan
                    ? meta_output(Shape(xv.shape), xv.dtype, name + ".z")
                    : data_output(memfcn::leaky_relu(xv.data, slope), name + ".z");
    n.outputs = {out.id};
    n.save_set = mode_ == TapeMode::Infer ? std::vector<int>{} : std::vector<int>{out.id};
    finish_node(std::move(n), {x.id}, out);
    return out;
  }

  Value mul(Value a, Value b, std::string name) {
    const ValueRec& av = rec(a);
    check_shape(av.shape == rec(b).shape, "mul: shape mismatch");
    NodeRec n;
    n.kind = OpKind::Mul;
    n.name = name;
    n.inputs = {a.id, b.id};
    Value out = mode_ == TapeMode::Plan
                    ? meta_output(Shape(av.shape), av.dtype, name + ".out")
                    : data_output(memfcn::mul(av.data, rec(b).data), name + ".out");
    n.outputs = {out.id};
    n.save_set = mode_ == TapeMode::Infer ? std::vector<int>{} : std::vector<int>{a.id, b.id};
    finish_node(std::move(n), {a.id, b.id}, out);
    return out;
  }

  Value scale(Value x, double s, std::string name) {
    const ValueRec& xv = rec(x);
    NodeRec n;
    n.kind = OpKind::Scale;
    n.name = name;
    n.scalar = s;
    n.inputs = {x.id};
    Value out = mode_ == TapeMode::Plan
                    ? meta_output(Shape(xv.shape), xv.dtype, name + ".out")
                    : data_output(memfcn::scale(xv.data, s), name + ".out");
    n.outputs = {out.id};
    finish_node(std::move(n), {x.id}, out);
    return out;
  }

  Value sum_all(Value x, std::string name) {
    const ValueRec& xv = rec(x);
    NodeRec n;
    n.kind = OpKind::SumAll;
    n.name = name;
    n.inputs = {x.id};
    Value out = mode_ == TapeMode::Plan
                    ? meta_output(Shape{1}, xv.dtype, name + ".out")
                    : data_output(Tensor::full({1}, memfcn::sum_all(xv.data), xv.dtype),
                                  name + ".out");
    n.outputs = {out.id};
    finish_node(std::move(n), {x.id}, out);
    return out;
  }

  struct LossValues {
    Value loss;
    Value probs;
  };

  // Loss lives on the tape like any op: saves {probabilities, labels}, so the
  // planner and the executor agree on training-residency accounting.
  LossValues dice_ce_loss(Value logits, Value labels, double wce, double wd, double eps_d,
                          std::string name) {
    const ValueRec& lv = rec(logits);
    NodeRec n;
    n.kind = OpKind::DiceCeLoss;
    n.name = name;
    n.wce = wce;
    n.wd = wd;
    n.eps_d = eps_d;
    n.inputs = {logits.id, labels.id};
    const DType loss_dt = lv.dtype == DType::F64 ? DType::F64 : DType::F32;
    Value loss, probs;
    if (mode_ == TapeMode::Plan) {
      check_shape(rec(labels).shape ==
                      Shape({lv.shape[0], lv.shape[2], lv.shape[3], lv.shape[4]}),
                  "dice_ce_loss: label extents do not match logits");
      probs = meta_output(Shape(lv.shape), lv.dtype, name + ".p");
      loss = meta_output(Shape{1}, loss_dt, name + ".out");
    } else {
      Tensor p;
      DiceCeAux aux = dice_ce_forward(lv.data, rec(labels).data, wce, wd, eps_d, &p);
      n.loss_aux = std::move(aux);
      probs = data_output(std::move(p), name + ".p");
      loss = data_output(Tensor::full({1}, n.loss_aux.loss, loss_dt), name + ".out");
    }
    n.outputs = {loss.id, probs.id};
    n.save_set = mode_ == TapeMode::Infer ? std::vector<int>{}
                                          : std::vector<int>{probs.id, labels.id};
    finish_node(std::move(n), {logits.id, labels.id}, loss);
    values_[static_cast<std::size_t>(probs.id)].needs_grad = false;
    return {loss, probs};
  }

  // ----------------------------------------------------------- accessors

  const Tensor& tensor(Value v) const {
    const ValueRec& r = rec(v);
    check_config(r.data.defined(), "tensor(): value has no data (planning tape?)");
    return r.data;
  }

  const ValueRec& value(Value v) const { return rec(v); }
  const std::vector<NodeRec>& nodes() const { return nodes_; }
  std::int64_t num_values() const { return static_cast<std::int64_t>(values_.size()); }

  // ------------------------------------------------- retained accounting

  /* The deduplicated retained-buffer pool: every saved tensor, counted once
     by storage identity, parameters excluded. This is the activation-memory
     figure the planner must reproduce exactly. */
  std::int64_t retained_bytes() const {
    std::unordered_set<int> seen;
    std::int64_t total = 0;
    for (const NodeRec& n : nodes_)
      for (int vid : n.save_set) {
        const ValueRec& v = values_[static_cast<std::size_t>(vid)];
        if (v.is_param) continue;
        if (!seen.insert(v.storage_key).second) continue;
        total += shape_numel(v.shape) * static_cast<std::int64_t>(dtype_size(v.dtype));
      }
    return total;
  }

  std::vector<RetainedEntry> retained_entries() const {
    std::unordered_set<int> seen;
    std::vector<RetainedEntry> out;
    for (const NodeRec& n : nodes_)
      for (int vid : n.save_set) {
        const ValueRec& v = values_[static_cast<std::size_t>(vid)];
        if (v.is_param) continue;
        RetainedEntry e;
        e.node = n.name;
        e.tensor = v.name;
        e.shape = v.shape;
        e.dtype = v.dtype;
        e.shared = !seen.insert(v.storage_key).second;
        e.bytes = e.shared ? 0
                           : shape_numel(v.shape) * static_cast<std::int64_t>(dtype_size(v.dtype));
        out.push_back(std::move(e));
      }
    return out;
  }

  // Drop forward tensors that no backward step will read: everything that is
  // neither saved, a leaf, nor aliased to a saved buffer. After this call the
  // executor's live activation set matches the retained-buffer pool.
  void release_unsaved() {
    check_config(mode_ == TapeMode::Train, "release_unsaved: training tapes only");
    std::unordered_set<int> keep_keys;
    for (const NodeRec& n : nodes_)
      for (int vid : n.save_set)
        keep_keys.insert(values_[static_cast<std::size_t>(vid)].storage_key);
    for (ValueRec& v : values_) {
      if (v.producer < 0) continue;  // leaves stay
      if (keep_keys.count(v.storage_key)) continue;
      v.data = Tensor();
    }
  }

  // ------------------------------------------------------------ backward

  /* Reverse sweep. Gradients accumulate per value id; each value's gradient
     is complete once its producing node is processed (topological order), at
     which point it is dropped from the working map. The returned map holds
     leaf gradients only: parameters and any requires-grad inputs. `seed`
     multiplies the loss gradient (loss scaling hook). */
  std::unordered_map<int, Tensor> backward(Value loss, double seed = 1.0) {
    check_config(mode_ == TapeMode::Train, "backward: training tapes only");
    const ValueRec& lv = rec(loss);
    check_shape(shape_numel(lv.shape) == 1, "backward: loss must be scalar");
    std::unordered_map<int, Tensor> grads;
    grads[loss.id] = Tensor::full({1}, seed, lv.dtype);

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      const NodeRec& n = *it;
      node_backward(n, grads);
      for (int out : n.outputs) grads.erase(out);
    }
    // Only leaves remain. Trim to the ones that asked for gradients.
    for (auto it = grads.begin(); it != grads.end();) {
      const ValueRec& v = values_[static_cast<std::size_t>(it->first)];
      if (!v.requires_grad) it = grads.erase(it);
      else ++it;
    }
    return grads;
  }

 private:
  TapeMode mode_;
  BufferPolicy policy_;
  std::vector<ValueRec> values_;
  std::vector<NodeRec> nodes_;
  std::unordered_map<const void*, int> storage_keys_;
  int next_key_ = 0;

  const ValueRec& rec(Value v) const {
    check_config(v.id >= 0 && v.id < static_cast<int>(values_.size()), "unknown tape value");
    return values_[static_cast<std::size_t>(v.id)];
  }

  int key_for(const Tensor& t) {
    auto [it, inserted] = storage_keys_.try_emplace(t.storage_id(), next_key_);
    if (inserted) ++next_key_;
    return it->second;
  }

  Value push_value(ValueRec&& v) {
    values_.push_back(std::move(v));
    return Value{static_cast<int>(values_.size()) - 1};
  }

  Value meta_output(Shape shape, DType dt, std::string name) {
    ValueRec v;
    v.shape = std::move(shape);
    v.dtype = dt;
    v.storage_key = next_key_++;
    v.name = std::move(name);
    return push_value(std::move(v));
  }

  Value data_output(Tensor t, std::string name) {
    ValueRec v;
    v.shape = t.shape();
    v.dtype = t.dtype();
    v.storage_key = key_for(t);
    v.data = std::move(t);
    v.name = std::move(name);
    return push_value(std::move(v));
  }

  void finish_node(NodeRec&& n, std::initializer_list<int> grad_inputs, Value primary_out) {
    bool needs = false;
    for (int vid : grad_inputs)
      if (vid >= 0 && values_[static_cast<std::size_t>(vid)].needs_grad) needs = true;
    for (int out : n.outputs) {
      values_[static_cast<std::size_t>(out)].producer = static_cast<int>(nodes_.size());
      values_[static_cast<std::size_t>(out)].needs_grad = needs;
    }
    (void)primary_out;
    nodes_.push_back(std::move(n));
  }

  static Tensor cast_per_channel(const std::vector<double>& v, DType dt) {
    Tensor t(Shape{static_cast<std::int64_t>(v.size())}, dt);
    for (std::size_t i = 0; i < v.size(); ++i) t.set(static_cast<std::int64_t>(i), v[i]);
    return t;
  }

  void accumulate(std::unordered_map<int, Tensor>& grads, int vid, Tensor g) {
    auto it = grads.find(vid);
    if (it == grads.end()) {
      grads.emplace(vid, std::move(g));
    } else {
      it->second = memfcn::add(it->second, g);
    }
  }

  bool wants(int vid) const { return values_[static_cast<std::size_t>(vid)].needs_grad; }

  void node_backward(const NodeRec& n, std::unordered_map<int, Tensor>& grads) {
    if (n.kind == OpKind::Leaf) return;
    auto gout = [&](int i) -> const Tensor* {
      auto it = grads.find(n.outputs[static_cast<std::size_t>(i)]);
      return it == grads.end() ? nullptr : &it->second;
    };
    const Tensor* g0 = gout(0);
    if (!g0) return;  // nothing downstream consumed this node's result

    switch (n.kind) {
      case OpKind::Conv3d: {
        const ValueRec& x = values_[static_cast<std::size_t>(n.inputs[0])];
        const ValueRec& w = values_[static_cast<std::size_t>(n.inputs[1])];
        Conv3dGrads g = conv3d_backward(*g0, x.data, w.data, n.has_bias, n.conv);
        if (wants(n.inputs[0])) accumulate(grads, n.inputs[0], std::move(g.dinput));
        if (wants(n.inputs[1])) accumulate(grads, n.inputs[1], std::move(g.dweight));
        if (n.has_bias && wants(n.inputs[2])) accumulate(grads, n.inputs[2], std::move(g.dbias));
        break;
      }
      case OpKind::ConvTranspose3d: {
        const ValueRec& x = values_[static_cast<std::size_t>(n.inputs[0])];
        const ValueRec& w = values_[static_cast<std::size_t>(n.inputs[1])];
        ConvTranspose3dGrads g = conv_transpose3d_backward(*g0, x.data, w.data);
        if (wants(n.inputs[0])) accumulate(grads, n.inputs[0], std::move(g.dinput));
        if (wants(n.inputs[1])) accumulate(grads, n.inputs[1], std::move(g.dweight));
        break;
      }
      case OpKind::NormAct: {
        const ValueRec& gamma = values_[static_cast<std::size_t>(n.inputs[1])];
        const ValueRec& beta = values_[static_cast<std::size_t>(n.inputs[2])];
        const ValueRec& z = values_[static_cast<std::size_t>(n.outputs[0])];
        if (policy_ == BufferPolicy::InplaceABN) {
          IabnGrads g = iabn_backward(*g0, z.data, gamma.data, beta.data, n.mean, n.var, n.eps,
                                      n.slope, n.gamma_floor);
          if (wants(n.inputs[0])) accumulate(grads, n.inputs[0], std::move(g.dx));
          if (wants(n.inputs[1]))
            accumulate(grads, n.inputs[1], cast_per_channel(g.dgamma, gamma.dtype));
          if (wants(n.inputs[2]))
            accumulate(grads, n.inputs[2], cast_per_channel(g.dbeta, beta.dtype));
        } else {
          const ValueRec& x = values_[static_cast<std::size_t>(n.inputs[0])];
          Tensor gy = leaky_relu_backward(*g0, z.data, n.slope);
          BnGrads g = bn_backward(gy, x.data, gamma.data, n.mean, n.var, n.eps);
          if (wants(n.inputs[0])) accumulate(grads, n.inputs[0], std::move(g.dx));
          if (wants(n.inputs[1]))
            accumulate(grads, n.inputs[1], cast_per_channel(g.dgamma, gamma.dtype));
          if (wants(n.inputs[2]))
            accumulate(grads, n.inputs[2], cast_per_channel(g.dbeta, beta.dtype));
        }
        break;
      }
      case OpKind::MaxPool2: {
        const ValueRec& idx = values_[static_cast<std::size_t>(n.outputs[1])];
        if (wants(n.inputs[0]))
          accumulate(grads, n.inputs[0], maxpool2_backward(*g0, idx.data, n.in_shape));
        break;
      }
      case OpKind::ConcatC: {
        if (wants(n.inputs[0])) accumulate(grads, n.inputs[0], channel_slice(*g0, 0, n.ca));
        if (wants(n.inputs[1]))
          accumulate(grads, n.inputs[1], channel_slice(*g0, n.ca, n.ca + n.cb));
        break;
      }
      case OpKind::Add: {
        if (wants(n.inputs[0])) accumulate(grads, n.inputs[0], *g0);
        if (wants(n.inputs[1])) accumulate(grads, n.inputs[1], *g0);
        break;
      }
      case OpKind::LeakyRelu: {
        const ValueRec& z = values_[static_cast<std::size_t>(n.outputs[0])];
        if (wants(n.inputs[0]))
          accumulate(grads, n.inputs[0], leaky_relu_backward(*g0, z.data, n.slope));
        break;
      }
      case OpKind::Mul: {
        const ValueRec& a = values_[static_cast<std::size_t>(n.inputs[0])];
        const ValueRec& b = values_[static_cast<std::size_t>(n.inputs[1])];
        if (wants(n.inputs[0])) accumulate(grads, n.inputs[0], memfcn::mul(*g0, b.data));
        if (wants(n.inputs[1])) accumulate(grads, n.inputs[1], memfcn::mul(*g0, a.data));
        break;
      }
      case OpKind::Scale: {
        if (wants(n.inputs[0])) accumulate(grads, n.inputs[0], memfcn::scale(*g0, n.scalar));
        break;
      }
      case OpKind::SumAll: {
        if (wants(n.inputs[0])) {
          const ValueRec& x = values_[static_cast<std::size_t>(n.inputs[0])];
          accumulate(grads, n.inputs[0], Tensor::full(Shape(x.shape), g0->at(0), x.dtype));
        }
        break;
      }
      case OpKind::DiceCeLoss: {
        if (wants(n.inputs[0])) {
          const ValueRec& p = values_[static_cast<std::size_t>(n.outputs[1])];
          const ValueRec& labels = values_[static_cast<std::size_t>(n.inputs[1])];
          const ValueRec& logits = values_[static_cast<std::size_t>(n.inputs[0])];
          Tensor dl = dice_ce_backward(p.data, labels.data, n.loss_aux, n.wce, n.wd, n.eps_d,
                                       g0->at(0), logits.dtype);
          accumulate(grads, n.inputs[0], std::move(dl));
        }
        break;
      }
      case OpKind::Leaf:
        break;
    }
  }
};

// ------------------------------------------------------- finite differences

/* Central-difference gradient oracle: F64, h default 1e-5. The full variant
   probes every coordinate; the sampled variant probes the given coordinate
   list (for composites where 2*numel forward passes would be wasteful). */
template <typename F>
Tensor finite_diff_grad(F&& f, const Tensor& x, double h = 1e-5) {
  check_config(x.dtype() == DType::F64, "finite_diff_grad: x must be F64");
  Tensor g(x.shape(), DType::F64);
  Tensor probe = x.clone();
  auto px = probe.f64();
  auto pg = g.f64();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double v = px[static_cast<std::size_t>(i)];
    px[static_cast<std::size_t>(i)] = v + h;
    const double fp = f(probe);
    px[static_cast<std::size_t>(i)] = v - h;
    const double fm = f(probe);
    px[static_cast<std::size_t>(i)] = v;
    pg[static_cast<std::size_t>(i)] = (fp - fm) / (2.0 * h);
  }
  return g;
}

template <typename F>
std::vector<double> finite_diff_grad_at(F&& f, const Tensor& x,
                                        const std::vector<std::int64_t>& coords,
                                        double h = 1e-5) {
  check_config(x.dtype() == DType::F64, "finite_diff_grad_at: x must be F64");
  Tensor probe = x.clone();
  auto px = probe.f64();
  std::vector<double> out;
  out.reserve(coords.size());
  for (std::int64_t i : coords) {
    const double v = px[static_cast<std::size_t>(i)];
    px[static_cast<std::size_t>(i)] = v + h;
    const double fp = f(probe);
    px[static_cast<std::size_t>(i)] = v - h;
    const double fm = f(probe);
    px[static_cast<std::size_t>(i)] = v;
    out.push_back((fp - fm) / (2.0 * h));
  }
  return out;
}

// max |a-b| / max(||a||_inf, ||b||_inf, floor) — the relative error used by
// every gradient comparison in the test suite.
inline double rel_error(const Tensor& a, const Tensor& b, double floor_ = 1e-12) {
  check_shape(a.shape() == b.shape(), "rel_error: shape mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    diff = std::max(diff, std::fabs(a.at(i) - b.at(i)));
    na = std::max(na, std::fabs(a.at(i)));
    nb = std::max(nb, std::fabs(b.at(i)));
  }
  return diff / std::max({na, nb, floor_});
}

}  // namespace memfcn

#endif  // MEMFCN_AUTOGRAD_HPP
