#pragma once

#include <string>
#include <vector>

namespace vlp {

/// Prompt template lists for the two input modalities. Each template carries
/// exactly one `{}` placeholder for the entity name.
struct PromptTemplates {
    std::vector<std::string> video;
    std::vector<std::string> image;
};

/// The built-in 12 video + 12 image templates.
const PromptTemplates& default_templates();

/// Template file: UTF-8, one template per line, under "[video]" and "[image]"
/// section headers.
PromptTemplates load_templates(const std::string& path);
void save_templates(const PromptTemplates& t, const std::string& path);

/// ConfigError unless the template holds exactly one `{}` placeholder.
void validate_template(const std::string& tpl);

std::string instantiate_template(const std::string& tpl, const std::string& entity);

}  // namespace vlp
