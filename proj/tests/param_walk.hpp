#pragma once

// Enumerates (parameter pointer, gradient pointer) pairs over the model
// structs so finite-difference sweeps can walk every scalar.

#include <string>
#include <vector>

#include "metr/cem.hpp"
#include "metr/head.hpp"

namespace testutil {

struct ParamRef {
  double* value = nullptr;
  const double* grad = nullptr;
  std::string name;
};

inline void collect(metr::Vec& v, const metr::Vec& g, const std::string& name, std::vector<ParamRef>& out) {
  for (size_t i = 0; i < v.size(); ++i) out.push_back({&v[i], &g[i], name + "[" + std::to_string(i) + "]"});
}

inline void collect(metr::Mat& m, const metr::Mat& g, const std::string& name, std::vector<ParamRef>& out) {
  for (size_t i = 0; i < m.a.size(); ++i) out.push_back({&m.a[i], &g.a[i], name + "[" + std::to_string(i) + "]"});
}

inline void collect(metr::ClassDecoderLayerParams& p, const metr::ClassDecoderLayerParams& g,
                    const std::string& prefix, std::vector<ParamRef>& out) {
  collect(p.wq, g.wq, prefix + ".wq", out);
  collect(p.wk, g.wk, prefix + ".wk", out);
  collect(p.wv, g.wv, prefix + ".wv", out);
  collect(p.wo, g.wo, prefix + ".wo", out);
  collect(p.norm1.scale, g.norm1.scale, prefix + ".norm1.scale", out);
  collect(p.norm1.shift, g.norm1.shift, prefix + ".norm1.shift", out);
  collect(p.norm2.scale, g.norm2.scale, prefix + ".norm2.scale", out);
  collect(p.norm2.shift, g.norm2.shift, prefix + ".norm2.shift", out);
  collect(p.w1, g.w1, prefix + ".w1", out);
  collect(p.b1, g.b1, prefix + ".b1", out);
  collect(p.w2, g.w2, prefix + ".w2", out);
  collect(p.b2, g.b2, prefix + ".b2", out);
}

inline void collect(metr::CemParams& p, const metr::CemParams& g, std::vector<ParamRef>& out) {
  collect(p.layers[0], g.layers[0], "cem.layer0", out);
  collect(p.layers[1], g.layers[1], "cem.layer1", out);
  collect(p.score_proj, g.score_proj, "cem.score_proj", out);
  collect(p.bias, g.bias, "cem.bias", out);
}

inline void collect(metr::HeadParams& p, const metr::HeadParams& g, std::vector<ParamRef>& out) {
  collect(p.cls_w, g.cls_w, "head.cls_w", out);
  collect(p.cls_b, g.cls_b, "head.cls_b", out);
  collect(p.box_w1, g.box_w1, "head.box_w1", out);
  collect(p.box_b1, g.box_b1, "head.box_b1", out);
  collect(p.box_w2, g.box_w2, "head.box_w2", out);
  collect(p.box_b2, g.box_b2, "head.box_b2", out);
  collect(p.box_w3, g.box_w3, "head.box_w3", out);
  collect(p.box_b3, g.box_b3, "head.box_b3", out);
  collect(p.toy_decoder, g.toy_decoder, "head.toy_decoder", out);
}

}  // namespace testutil
