#include "m2s/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

namespace m2s {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Shortest decimal that parses back to the exact same double.
std::string fmt_double(double v) {
    char buf[64];
    for (int prec = 6; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return std::string(buf);
    }
    return std::string(buf);
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError("config: bad integer for " + key + ": '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        unsigned long long r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<std::uint64_t>(r);
    } catch (const std::exception&) {
        throw ValidationError("config: bad unsigned integer for " + key + ": '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    double r = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0') {
        throw ValidationError("config: bad number for " + key + ": '" + v + "'");
    }
    return r;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ValidationError("config: bad boolean for " + key + ": '" + v + "' (use true/false)");
}

template <std::size_t N>
std::array<int, N> parse_int_list(const std::string& key, const std::string& v) {
    std::array<int, N> out{};
    std::stringstream ss(v);
    std::string tok;
    std::size_t i = 0;
    while (std::getline(ss, tok, ',')) {
        if (i >= N) throw ValidationError("config: too many values for " + key);
        out[i++] = parse_int(key, trim(tok));
    }
    if (i != N) {
        throw ValidationError("config: " + key + " needs " + std::to_string(N) +
                              " comma-separated values");
    }
    return out;
}

template <std::size_t N>
std::string fmt_int_list(const std::array<int, N>& v) {
    std::string s;
    for (std::size_t i = 0; i < N; ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

}  // namespace

std::string RunConfig::model_section_text() const {
    std::ostringstream os;
    os << "model.num_classes = " << num_classes << "\n";
    os << "model.backbone_channels = " << fmt_int_list(backbone_channels) << "\n";
    os << "model.cam.enabled = " << (cam_enabled ? "true" : "false") << "\n";
    os << "model.cam.plan = " << cam_plan << "\n";
    os << "model.cam.tap_low = " << cam_tap_low << "\n";
    os << "model.cam.tap_mid = " << cam_tap_mid << "\n";
    os << "model.cam.tap_high = " << cam_tap_high << "\n";
    os << "model.cam.channels = " << fmt_int_list(cam_channels) << "\n";
    os << "model.attention = " << attention << "\n";
    os << "model.drm_per_level = " << (drm_per_level ? "true" : "false") << "\n";
    os << "model.head_channels = " << head_channels << "\n";
    return os.str();
}

std::uint64_t RunConfig::model_hash() const { return fnv1a64(model_section_text()); }

std::string RunConfig::serialize() const {
    std::ostringstream os;
    os << model_section_text();
    os << "train.phase1.epochs = " << phase1_epochs << "\n";
    os << "train.phase1.lr = " << fmt_double(phase1_lr) << "\n";
    os << "train.phase2.epochs = " << phase2_epochs << "\n";
    os << "train.phase2.lr = " << fmt_double(phase2_lr) << "\n";
    os << "train.momentum = " << fmt_double(momentum) << "\n";
    os << "train.weight_decay = " << fmt_double(weight_decay) << "\n";
    os << "train.batch_size = " << batch_size << "\n";
    os << "train.seed = " << seed << "\n";
    os << "train.loss.box = " << fmt_double(loss_box) << "\n";
    os << "train.loss.obj = " << fmt_double(loss_obj) << "\n";
    os << "train.loss.cls = " << fmt_double(loss_cls) << "\n";
    os << "data.dir = " << data_dir << "\n";
    os << "data.image_size = " << image_size << "\n";
    os << "data.train_count = " << train_count << "\n";
    os << "data.val_count = " << val_count << "\n";
    os << "data.objects_min = " << objects_min << "\n";
    os << "data.objects_max = " << objects_max << "\n";
    os << "data.size_min = " << size_min << "\n";
    os << "data.size_max = " << size_max << "\n";
    os << "data.bg_base = " << bg_base << "\n";
    os << "data.bg_coarse = " << bg_coarse << "\n";
    os << "data.bg_fine = " << bg_fine << "\n";
    os << "data.bg_speckles = " << bg_speckles << "\n";
    os << "data.bg_structures = " << bg_structures << "\n";
    os << "data.seed = " << data_seed << "\n";
    os << "eval.conf = " << fmt_double(conf) << "\n";
    os << "eval.nms_iou = " << fmt_double(nms_iou) << "\n";
    os << "eval.max_det = " << max_det << "\n";
    return os.str();
}

RunConfig RunConfig::parse(const std::string& text, const std::string& config_dir) {
    RunConfig cfg;
    cfg.config_dir = config_dir;

    std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters;
    auto set_int = [&](const std::string& k, int* dst) {
        setters[k] = [dst](const std::string& key, const std::string& v) {
            *dst = parse_int(key, v);
        };
    };
    auto set_double = [&](const std::string& k, double* dst) {
        setters[k] = [dst](const std::string& key, const std::string& v) {
            *dst = parse_double(key, v);
        };
    };
    auto set_bool = [&](const std::string& k, bool* dst) {
        setters[k] = [dst](const std::string& key, const std::string& v) {
            *dst = parse_bool(key, v);
        };
    };
    auto set_string = [&](const std::string& k, std::string* dst) {
        setters[k] = [dst](const std::string&, const std::string& v) { *dst = v; };
    };
    auto set_u64 = [&](const std::string& k, std::uint64_t* dst) {
        setters[k] = [dst](const std::string& key, const std::string& v) {
            *dst = parse_u64(key, v);
        };
    };

    set_int("model.num_classes", &cfg.num_classes);
    setters["model.backbone_channels"] = [&cfg](const std::string& k, const std::string& v) {
        cfg.backbone_channels = parse_int_list<5>(k, v);
    };
    set_bool("model.cam.enabled", &cfg.cam_enabled);
    set_string("model.cam.plan", &cfg.cam_plan);
    set_int("model.cam.tap_low", &cfg.cam_tap_low);
    set_int("model.cam.tap_mid", &cfg.cam_tap_mid);
    set_int("model.cam.tap_high", &cfg.cam_tap_high);
    setters["model.cam.channels"] = [&cfg](const std::string& k, const std::string& v) {
        cfg.cam_channels = parse_int_list<3>(k, v);
    };
    set_string("model.attention", &cfg.attention);
    set_bool("model.drm_per_level", &cfg.drm_per_level);
    set_int("model.head_channels", &cfg.head_channels);
    set_int("train.phase1.epochs", &cfg.phase1_epochs);
    set_double("train.phase1.lr", &cfg.phase1_lr);
    set_int("train.phase2.epochs", &cfg.phase2_epochs);
    set_double("train.phase2.lr", &cfg.phase2_lr);
    set_double("train.momentum", &cfg.momentum);
    set_double("train.weight_decay", &cfg.weight_decay);
    set_int("train.batch_size", &cfg.batch_size);
    set_u64("train.seed", &cfg.seed);
    set_double("train.loss.box", &cfg.loss_box);
    set_double("train.loss.obj", &cfg.loss_obj);
    set_double("train.loss.cls", &cfg.loss_cls);
    set_string("data.dir", &cfg.data_dir);
    set_int("data.image_size", &cfg.image_size);
    set_int("data.train_count", &cfg.train_count);
    set_int("data.val_count", &cfg.val_count);
    set_int("data.objects_min", &cfg.objects_min);
    set_int("data.objects_max", &cfg.objects_max);
    set_int("data.size_min", &cfg.size_min);
    set_int("data.size_max", &cfg.size_max);
    set_int("data.bg_base", &cfg.bg_base);
    set_int("data.bg_coarse", &cfg.bg_coarse);
    set_int("data.bg_fine", &cfg.bg_fine);
    set_int("data.bg_speckles", &cfg.bg_speckles);
    set_int("data.bg_structures", &cfg.bg_structures);
    set_u64("data.seed", &cfg.data_seed);
    set_double("eval.conf", &cfg.conf);
    set_double("eval.nms_iou", &cfg.nms_iou);
    set_int("eval.max_det", &cfg.max_det);

    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ValidationError("config line " + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + t + "'");
        }
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end()) {
            throw ValidationError("config line " + std::to_string(lineno) +
                                  ": unknown key '" + key + "'");
        }
        it->second(key, value);
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("config: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    std::size_t slash = path.find_last_of('/');
    std::string dir = (slash == std::string::npos) ? "." : path.substr(0, slash);
    return parse(ss.str(), dir.empty() ? "/" : dir);
}

void RunConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ValidationError("config: cannot write '" + path + "'");
    out << serialize();
}

void RunConfig::validate() const {
    if (num_classes < 1 || num_classes > 3) {
        throw ValidationError("config: model.num_classes must be 1..3 (shape classes)");
    }
    for (int c : backbone_channels) {
        if (c < 1) throw ValidationError("config: backbone channels must be positive");
    }
    for (int c : cam_channels) {
        if (c < 1) throw ValidationError("config: cam channels must be positive");
    }
    attention_from_string_check();
    if (head_channels < 1) throw ValidationError("config: model.head_channels must be positive");
    if (phase1_epochs < 0 || phase2_epochs < 0) {
        throw ValidationError("config: epochs must be >= 0");
    }
    if (phase1_lr <= 0 || phase2_lr <= 0) {
        throw ValidationError("config: learning rates must be positive");
    }
    if (batch_size < 1) throw ValidationError("config: train.batch_size must be >= 1");
    if (image_size < 32 || image_size % 32 != 0) {
        throw ValidationError("config: data.image_size must be a positive multiple of 32");
    }
    if (train_count < 0 || val_count < 0) {
        throw ValidationError("config: dataset counts must be >= 0");
    }
    if (objects_min < 0 || objects_max < objects_min) {
        throw ValidationError("config: bad data.objects_min/objects_max range");
    }
    if (size_min < 2 || size_max < size_min) {
        throw ValidationError("config: object sizes need 2 <= size_min <= size_max");
    }
    if (size_max >= image_size) {
        throw ValidationError("config: data.size_max must be smaller than the image");
    }
    if (bg_speckles < 0) throw ValidationError("config: data.bg_speckles must be >= 0");
    if (bg_structures < 0) throw ValidationError("config: data.bg_structures must be >= 0");
    if (conf < 0 || conf > 1 || nms_iou < 0 || nms_iou > 1) {
        throw ValidationError("config: eval.conf and eval.nms_iou must be in [0,1]");
    }
    if (max_det < 1) throw ValidationError("config: eval.max_det must be >= 1");
}

void RunConfig::attention_from_string_check() const {
    if (attention != "none" && attention != "drm" && attention != "se" &&
        attention != "eca" && attention != "cbam") {
        throw ValidationError("config: model.attention must be one of none|drm|se|eca|cbam, got '" +
                              attention + "'");
    }
}

bool RunConfig::operator==(const RunConfig& o) const {
    return serialize() == o.serialize();
}

std::string RunConfig::resolve_path(const std::string& rel) const {
    if (rel.empty() || rel[0] == '/') return rel;
    return config_dir + "/" + rel;
}

}  // namespace m2s
