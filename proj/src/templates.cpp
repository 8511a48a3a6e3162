#include "vlp/templates.hpp"

#include <fstream>
#include <sstream>

#include "vlp/errors.hpp"

namespace vlp {

const PromptTemplates& default_templates() {
    static const PromptTemplates t{
        {
            "A footage of a {}.",
            "A footage of the {}.",
            "A footage of one {}.",
            "A video of a {}.",
            "A video of the {}.",
            "A video of one {}.",
            "A portrait of a {}.",
            "A portrait of the {}.",
            "A portrait of one {}.",
            "A video footage of a {}.",
            "A video footage of the {}.",
            "A video footage of one {}.",
        },
        {
            "A photo of a {}.",
            "A photo of the {}.",
            "A photo of one {}.",
            "A picture of a {}.",
            "A picture of the {}.",
            "A picture of one {}.",
            "A good photo of a {}.",
            "A good photo of the {}.",
            "A good photo of one {}.",
            "A good picture of a {}.",
            "A good picture of the {}.",
            "A good picture of one {}.",
        },
    };
    return t;
}

void validate_template(const std::string& tpl) {
    std::size_t count = 0;
    for (std::size_t i = 0; i + 1 < tpl.size(); ++i) {
        if (tpl[i] == '{' && tpl[i + 1] == '}') ++count;
    }
    if (count != 1) {
        throw ConfigError("template '" + tpl + "' must contain exactly one {} placeholder");
    }
}

std::string instantiate_template(const std::string& tpl, const std::string& entity) {
    validate_template(tpl);
    const std::size_t pos = tpl.find("{}");
    return tpl.substr(0, pos) + entity + tpl.substr(pos + 2);
}

PromptTemplates load_templates(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("templates: cannot open '" + path + "'");
    PromptTemplates out;
    std::vector<std::string>* section = nullptr;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (line == "[video]") { section = &out.video; continue; }
        if (line == "[image]") { section = &out.image; continue; }
        if (section == nullptr) {
            throw ConfigError("templates: line before any [video]/[image] section: '" + line +
                              "'");
        }
        validate_template(line);
        section->push_back(line);
    }
    if (out.video.empty() && out.image.empty()) {
        throw ConfigError("templates: no templates in '" + path + "'");
    }
    return out;
}

void save_templates(const PromptTemplates& t, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("templates: cannot write '" + path + "'");
    out << "[video]\n";
    for (const auto& s : t.video) out << s << '\n';
    out << "[image]\n";
    for (const auto& s : t.image) out << s << '\n';
}

}  // namespace vlp
